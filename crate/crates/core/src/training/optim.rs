use crate::autodiff::Tensor;
use crate::models::Params;

use super::TrainConfig;

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f64>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Matrices decay; vectors (biases, gains) and scalars do not.
pub fn decay_mask(params: &Params) -> Vec<bool> {
    params
        .tensors()
        .iter()
        .map(|t| t.rows() > 1 && t.cols() > 1)
        .collect()
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// `decay[i]` selects which tensors receive weight decay.
pub fn adamw_step(
    params: &mut [Tensor<f64>],
    grads: &[Tensor<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
    decay: &[bool],
) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decay.get(i).copied().unwrap_or(false) {
            cfg.weight_decay
        } else {
            0.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *x *= 1.0 - cfg.lr * wd;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        super::scale_all(grads, max_norm / norm);
    }
    norm
}
