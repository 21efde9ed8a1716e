use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::models::{Classifier, ClassifierConfig};

use super::{
    adamw_step, clip_global_norm, decay_mask, scale_all, summed_gradients, AdamState, BatchOrder,
    ClfExample, TrainConfig, TrainError,
};

/// Decision threshold on `p_valid` for the classification metrics.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BinaryMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Mean binary cross-entropy.
    pub loss: f64,
}

impl BinaryMetrics {
    pub fn from_predictions(probs: &[f64], labels: &[bool]) -> Self {
        let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
        let mut loss = 0.0;
        for (&p, &y) in probs.iter().zip(labels) {
            let pred = p > DECISION_THRESHOLD;
            match (pred, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
            correct += usize::from(pred == y);
            let q = p.clamp(1e-12, 1.0 - 1e-12);
            loss -= if y { q.ln() } else { (1.0 - q).ln() };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            f1,
            precision,
            recall,
            accuracy: ratio(correct, probs.len()),
            loss: if probs.is_empty() {
                0.0
            } else {
                loss / probs.len() as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    /// Validation metrics of the kept checkpoint.
    pub best: BinaryMetrics,
    pub best_epoch: usize,
    pub first_batch_loss: f64,
    pub history: Vec<ClassifierEpoch>,
}

/// `p_valid` for every example, scored in parallel.
pub fn evaluate_classifier(
    model: &Classifier,
    data: &[ClfExample],
) -> Result<BinaryMetrics, TrainError> {
    let probs: Vec<f64> = data
        .par_iter()
        .map(|e| model.p_valid(&e.ids))
        .collect::<Result<_, _>>()?;
    let labels: Vec<bool> = data.iter().map(|e| e.label).collect();
    Ok(BinaryMetrics::from_predictions(&probs, &labels))
}

/// Trains with binary cross-entropy and keeps the parameters with the best
/// validation F1.
pub fn train_classifier(
    model_cfg: ClassifierConfig,
    train: &[ClfExample],
    val: &[ClfExample],
    cfg: &TrainConfig,
) -> Result<(Classifier, ClassifierReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if train.iter().all(|e| e.label) || train.iter().all(|e| !e.label) {
        return Err(TrainError::DegenerateLabels);
    }
    let mut model = Classifier::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let decay = decay_mask(model.params());
    let mut state = AdamState::new(model.params().tensors());
    let mut order = BatchOrder::new(train.len(), cfg.batch_size, cfg.seed);
    let per_epoch = order.batches_per_epoch();

    let mut best: Option<(BinaryMetrics, usize, crate::models::Params)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut first_batch_loss = f64::NAN;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            let batch = order.batch(step);
            let (loss, mut grads, n) = summed_gradients(model.params(), &batch, |g, w, i| {
                let ex = &train[i];
                let p = model.forward_ids(g, w, &ex.ids)?;
                Ok(Some(g.binary_cross_entropy(
                    p,
                    &[if ex.label { 1.0 } else { 0.0 }],
                )?))
            })?;
            let mean = loss / n as f64;
            if !mean.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    what: "classifier loss",
                });
            }
            if step == 0 {
                first_batch_loss = mean;
            }
            epoch_loss += mean;
            scale_all(&mut grads, 1.0 / n as f64);
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
        let val_metrics = if val.is_empty() {
            evaluate_classifier(&model, train)?
        } else {
            evaluate_classifier(&model, val)?
        };
        history.push(ClassifierEpoch {
            epoch,
            train_loss: epoch_loss / per_epoch as f64,
            val: val_metrics,
        });
        if best.as_ref().is_none_or(|b| val_metrics.f1 > b.0.f1) {
            best = Some((val_metrics, epoch, model.params().clone()));
        }
    }
    let (best_metrics, best_epoch) = match best {
        Some((m, e, p)) => {
            *model.params_mut() = p;
            (m, e)
        }
        None => (
            evaluate_classifier(&model, if val.is_empty() { train } else { val })?,
            0,
        ),
    };
    Ok((
        model,
        ClassifierReport {
            best: best_metrics,
            best_epoch,
            first_batch_loss,
            history,
        },
    ))
}
