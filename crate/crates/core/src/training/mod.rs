//! Classifier training, generator pretraining and Gumbel straight-through
//! refinement, sharing one AdamW implementation.

mod classifier;
mod data;
mod lm;
mod optim;
mod refine;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::dataset::{mix64, stream_rng};
use crate::models::{ModelError, Params};

pub use classifier::{
    evaluate_classifier, train_classifier, BinaryMetrics, ClassifierEpoch, ClassifierReport,
};
pub use data::{classifier_examples, lm_examples, ClfExample, LmExample};
pub use lm::{pretrain_lm, validation_nll, LmEpoch, PretrainReport};
pub use optim::{adamw_step, clip_global_norm, decay_mask, AdamState};
pub use refine::{
    anchored_st_gradcheck, gumbel_noise, gumbel_st_step, refine, rollout, LossWeighting,
    RefineConfig, RefineReport, RefineStep, Rollout,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training labels contain only one class")]
    DegenerateLabels,
    #[error("no training examples")]
    EmptyData,
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Temperature of the Gumbel-softmax relaxation over refinement steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSchedule {
    Fixed(f64),
    /// Geometric decay from `tau0` at the first step to `tau_min` at the last.
    ExpAnneal {
        tau0: f64,
        tau_min: f64,
    },
}

impl TauSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        match *self {
            TauSchedule::Fixed(t) => t,
            TauSchedule::ExpAnneal { tau0, tau_min } => {
                let frac = if total > 1 {
                    step as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                tau0 * (tau_min / tau0).powf(frac.min(1.0))
            }
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let ok = match *self {
            TauSchedule::Fixed(t) => t > 0.0 && t.is_finite(),
            TauSchedule::ExpAnneal { tau0, tau_min } => {
                tau0 > 0.0 && tau_min > 0.0 && tau0.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig("tau must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub tau: TauSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            seed: 42,
            grad_clip: 1.0,
            tau: TauSchedule::Fixed(1.0),
        }
    }
}

impl TrainConfig {
    /// Learning rate preset for large generators.
    pub const SLOW_LR: f64 = 0.95e-5;

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "lr {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(TrainError::InvalidConfig(
                "grad_clip and eps must be positive, weight_decay non-negative".into(),
            ));
        }
        self.tau.validate()
    }
}

/// Shuffled fixed-size batches, reshuffled every epoch from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.max(1),
            seed,
            cached: None,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Indices of the batch used at global step `step`.
    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let per = self.batches_per_epoch().max(1);
        let epoch = step / per;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut stream_rng(mix64(self.seed, 0x5348_5546), epoch as u64));
            self.cached = Some((epoch, order));
        }
        let order = &self.cached.as_ref().expect("just filled").1;
        let start = (step % per) * self.batch_size;
        order[start..(start + self.batch_size).min(self.n)].to_vec()
    }
}

/// Sum of per-example losses and gradients, computed on independent graphs
/// in parallel and reduced in index order. `f` returns `None` for examples
/// that contribute nothing.
#[allow(clippy::type_complexity)]
pub(crate) fn summed_gradients<F>(
    params: &Params,
    items: &[usize],
    f: F,
) -> Result<(f64, Vec<Tensor<f64>>, usize), TrainError>
where
    F: Fn(&mut Graph<f64>, &[Var], usize) -> Result<Option<Var>, TrainError> + Sync,
{
    let per: Vec<Result<Option<(f64, Vec<Tensor<f64>>)>, TrainError>> = items
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let w = params.bind(&mut g);
            let Some(loss) = f(&mut g, &w, i)? else {
                return Ok(None);
            };
            let value = g.value(loss).item();
            g.backward(loss)?;
            Ok(Some((value, params.grads(&g, &w))))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    let mut sum: Vec<Tensor<f64>> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    for r in per {
        if let Some((loss, grads)) = r? {
            total += loss;
            count += 1;
            for (s, gr) in sum.iter_mut().zip(&grads) {
                s.axpy(1.0, gr);
            }
        }
    }
    Ok((total, sum, count))
}

pub(crate) fn scale_all(ts: &mut [Tensor<f64>], k: f64) {
    for t in ts {
        for x in t.data_mut() {
            *x *= k;
        }
    }
}
