use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor};
use crate::models::{Generator, Params};

use super::{
    adamw_step, clip_global_norm, decay_mask, scale_all, summed_gradients, AdamState, BatchOrder,
    LmExample, TrainConfig, TrainError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Token-level validation NLL before the first step.
    pub initial_val_nll: f64,
    pub best_val_nll: f64,
    /// Epoch whose parameters were kept; `None` if no epoch beat the start.
    pub best_epoch: Option<usize>,
    /// Mean batch NLL of every optimizer step.
    pub step_losses: Vec<f64>,
    pub history: Vec<LmEpoch>,
}

/// Token-weighted mean NLL over the target positions of `data`.
pub fn validation_nll(model: &Generator, data: &[LmExample]) -> Result<f64, TrainError> {
    let parts: Vec<(f64, usize)> = data
        .par_iter()
        .map(|e| {
            let mut g = Graph::inference();
            let w = model.params().bind_frozen(&mut g);
            let loss = model.lm_nll(&mut g, &w, &e.seq, e.prompt_len)?;
            let n = e.seq.len() - e.prompt_len;
            Ok((g.value(loss).item() * n as f64, n))
        })
        .collect::<Result<_, TrainError>>()?;
    let (sum, n) = parts
        .iter()
        .fold((0.0, 0), |(s, c), &(l, k)| (s + l, c + k));
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Mean teacher-forced NLL of a batch and its mean gradient.
pub(crate) fn lm_batch_gradients(
    model: &Generator,
    data: &[LmExample],
    batch: &[usize],
) -> Result<(f64, Vec<Tensor<f64>>), TrainError> {
    let (loss, mut grads, n) = summed_gradients(model.params(), batch, |g, w, i| {
        let e = &data[i];
        Ok(Some(model.lm_nll(g, w, &e.seq, e.prompt_len)?))
    })?;
    scale_all(&mut grads, 1.0 / n as f64);
    Ok((loss / n as f64, grads))
}

/// NLL training of `model` on valid-record sequences, keeping the parameters
/// with the lowest validation NLL.
pub fn pretrain_lm(
    mut model: Generator,
    train: &[LmExample],
    val: &[LmExample],
    cfg: &TrainConfig,
) -> Result<(Generator, PretrainReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let eval_set = if val.is_empty() { train } else { val };
    let decay = decay_mask(model.params());
    let mut state = AdamState::new(model.params().tensors());
    let mut order = BatchOrder::new(train.len(), cfg.batch_size, cfg.seed);
    let per_epoch = order.batches_per_epoch();

    let initial_val_nll = validation_nll(&model, eval_set)?;
    let mut best: (f64, Option<usize>, Params) = (initial_val_nll, None, model.params().clone());
    let mut step_losses = Vec::with_capacity(cfg.epochs * per_epoch);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            let batch = order.batch(step);
            let (loss, mut grads) = lm_batch_gradients(&model, train, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    what: "generator loss",
                });
            }
            step_losses.push(loss);
            epoch_loss += loss;
            clip_global_norm(&mut grads, cfg.grad_clip);
            adamw_step(
                model.params_mut().tensors_mut(),
                &grads,
                &mut state,
                cfg,
                &decay,
            );
            step += 1;
        }
        let val_nll = validation_nll(&model, eval_set)?;
        history.push(LmEpoch {
            epoch,
            train_loss: epoch_loss / per_epoch as f64,
            val_nll,
        });
        if val_nll < best.0 {
            best = (val_nll, Some(epoch), model.params().clone());
        }
    }
    let (best_val_nll, best_epoch, params) = best;
    *model.params_mut() = params;
    Ok((
        model,
        PretrainReport {
            initial_val_nll,
            best_val_nll,
            best_epoch,
            step_losses,
            history,
        },
    ))
}
