//! Power-converter topology synthesis workbench.
//!
//! The numerical core ([`linalg`], [`sim`], [`autodiff`]) is generic over
//! [`Real`]; the aliases below fix it to `f64`, the precision the models and
//! training loops use.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod circuit;
pub mod dataset;
pub mod encoding;
pub mod evaluation;
pub mod linalg;
pub mod models;
pub mod scalar;
pub mod sim;
pub mod training;

pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Network = sim::Network<f64>;
pub type SimResult = sim::SimResult<f64>;
