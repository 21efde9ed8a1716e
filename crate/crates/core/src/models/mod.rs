//! The autoregressive topology generator, the validity classifier, token
//! sampling and checkpoint persistence.

pub mod check;
pub mod checkpoint;
pub mod classifier;
pub mod generator;
mod layers;
pub mod sampling;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

pub use classifier::{Classifier, ClassifierConfig};
pub use generator::{Generator, GeneratorConfig, KvCache};
pub use sampling::DecodeConfig;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no target positions to score")]
    EmptyTarget,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("distribution row {row} sums to {sum}")]
    NonStochasticRows { row: usize, sum: f64 },
    #[error("invalid decode settings: {0}")]
    InvalidDecode(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<f64> {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Adds every tensor to `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<f64>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Adds every tensor to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<f64>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Gradients of the bound tensors after a backward pass.
    pub fn grads(&self, g: &Graph<f64>, vars: &[Var]) -> Vec<Tensor<f64>> {
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }

    /// Little-endian bytes of every value, for bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Layer-norm epsilon shared by both models.
pub const LN_EPS: f64 = 1e-5;

/// Dense layer `x W + b` with `b` broadcast over rows.
pub(crate) fn linear(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}
