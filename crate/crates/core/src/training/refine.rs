use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check::{gradcheck_against, GradcheckReport};
use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::dataset::{mix64, random_pool, stream_rng};
use crate::encoding::{prompt_ids, TokenId, Vocabulary};
use crate::models::check::small_classifier_config;
use crate::models::{Classifier, Generator, KvCache, ModelError};

use super::lm::lm_batch_gradients;
use super::{
    adamw_step, clip_global_norm, decay_mask, scale_all, summed_gradients, AdamState, BatchOrder,
    LmExample, TrainConfig, TrainError,
};

/// Gumbel(0, 1) draws `−ln(−ln u)`.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            -(-u.max(f64::MIN_POSITIVE).ln()).ln()
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Perturbs `logits` with Gumbel noise and returns the hard sample index
/// and the temperature-`tau` relaxation.
pub fn gumbel_st_step<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> (usize, Vec<f64>) {
    let noisy: Vec<f64> = logits
        .iter()
        .zip(gumbel_noise(logits.len(), rng))
        .map(|(l, z)| l + z)
        .collect();
    let hard = argmax(&noisy);
    let m = noisy[hard];
    let e: Vec<f64> = noisy.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    (hard, e.iter().map(|x| x / z).collect())
}

/// Graph version of [`gumbel_st_step`] with the noise supplied. Returns the
/// hard index and the relaxed row.
fn relaxed_row(
    g: &mut Graph<f64>,
    row: Var,
    noise: &[f64],
    tau: f64,
) -> Result<(usize, Var), TrainError> {
    let z = g.constant(Tensor::from_vec(1, noise.len(), noise.to_vec())?);
    let noisy = g.add(row, z)?;
    let hard = argmax(g.value(noisy).data());
    let scaled = g.scale(noisy, 1.0 / tau);
    Ok((hard, g.softmax(scaled, Axis::Cols)))
}

/// One sampled continuation and the frozen classifier's score of it.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Generated tokens after the prompt, without EOS.
    pub tokens: Vec<TokenId>,
    /// `p_valid` of the straight-through rows; `None` for an empty rollout.
    pub p_valid: Option<Var>,
}

/// Samples a continuation of `prompt` with Gumbel noise at every step.
///
/// Each step's straight-through row (hard forward, relaxed backward) is both
/// the next input, through the soft embedding path, and a row of the
/// classifier input. Generation stops at EOS, which is not scored.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    g: &mut Graph<f64>,
    gen: &Generator,
    gen_w: &[Var],
    clf: &Classifier,
    clf_w: &[Var],
    prompt: &[TokenId],
    tau: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Rollout, TrainError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyInput.into());
    }
    let vocab = Vocabulary::get();
    let width = gen.config().vocab_size;
    let limit = max_len.min(gen.config().max_len);
    let body_limit = clf.config().max_len;
    let mut cache = KvCache::default();
    let x = gen.embed_ids(g, gen_w, prompt)?;
    let logits = gen.forward_embedded(g, gen_w, x, &mut cache)?;
    let mut row = g.slice_rows(logits, prompt.len() - 1, 1)?;
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    while prompt.len() + tokens.len() < limit && tokens.len() < body_limit {
        let noise = gumbel_noise(width, rng);
        let (hard, soft) = relaxed_row(g, row, &noise, tau)?;
        if hard == vocab.eos() as usize {
            break;
        }
        let one_hot = g.constant(Tensor::one_hot(&[hard], width));
        let st = g.straight_through(one_hot, soft)?;
        tokens.push(hard as TokenId);
        rows.push(st);
        if prompt.len() + tokens.len() >= limit {
            break;
        }
        let x = gen.embed_soft(g, gen_w, st)?;
        row = gen.forward_embedded(g, gen_w, x, &mut cache)?;
    }
    let p_valid = match rows.len() {
        0 => None,
        1 => Some(clf.forward_dist(g, clf_w, rows[0])?),
        _ => {
            let dist = g.concat_rows(&rows)?;
            Some(clf.forward_dist(g, clf_w, dist)?)
        }
    };
    Ok(Rollout { tokens, p_valid })
}

/// How the two loss terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossWeighting {
    /// `λ = exp(−s)` with learnable `s` and an additive `s` penalty.
    Learnable { s1: f64, s2: f64 },
    /// Constant weights; `s` is not trained.
    Fixed { lambda1: f64, lambda2: f64 },
}

impl Default for LossWeighting {
    fn default() -> Self {
        LossWeighting::Learnable { s1: 0.0, s2: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub train: TrainConfig,
    pub steps: usize,
    /// Prompts rolled out per step for the validity term.
    pub rollout_batch: usize,
    /// Total sequence cap during rollouts, prompt included.
    pub max_len: usize,
    pub weighting: LossWeighting,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            steps: 200,
            rollout_batch: 8,
            max_len: crate::encoding::MAX_SEQ_LEN,
            weighting: LossWeighting::default(),
        }
    }
}

/// Metrics of one refinement step. Validity fields are NaN when every
/// rollout of the step was empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineStep {
    pub step: usize,
    pub l_llm: f64,
    pub l_valid: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mean_p_valid: f64,
}

impl RefineStep {
    pub const TSV_HEADER: &'static str = "step\tL_LLM\tL_valid\tlambda1\tlambda2\tmean_p_valid";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
            self.step, self.l_llm, self.l_valid, self.lambda1, self.lambda2, self.mean_p_valid
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub steps: Vec<RefineStep>,
}

impl RefineReport {
    /// Mean `p_valid` over the first and last `window` steps with scored rollouts.
    pub fn p_valid_trend(&self, window: usize) -> Option<(f64, f64)> {
        let scored: Vec<f64> = self
            .steps
            .iter()
            .map(|s| s.mean_p_valid)
            .filter(|p| p.is_finite())
            .collect();
        let w = window.min(scored.len() / 2);
        if w == 0 {
            return None;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        Some((mean(&scored[..w]), mean(&scored[scored.len() - w..])))
    }
}

/// Fine-tunes `gen` on teacher-forced NLL plus the frozen classifier's
/// invalidity score of its own Gumbel straight-through rollouts.
pub fn refine(
    mut gen: Generator,
    clf: &Classifier,
    train: &[LmExample],
    cfg: &RefineConfig,
) -> Result<(Generator, RefineReport), TrainError> {
    let tc = &cfg.train;
    tc.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if clf.config().encoding != gen.config().encoding
        || clf.config().vocab_size != gen.config().vocab_size
    {
        return Err(TrainError::InvalidConfig(
            "classifier and generator must share the encoding and vocabulary".into(),
        ));
    }
    let decay = decay_mask(gen.params());
    let mut state = AdamState::new(gen.params().tensors());
    let (mut s, learnable) = match cfg.weighting {
        LossWeighting::Learnable { s1, s2 } => (Tensor::from_vec(1, 2, vec![s1, s2])?, true),
        LossWeighting::Fixed { lambda1, lambda2 } => {
            if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
                return Err(TrainError::InvalidConfig(
                    "fixed loss weights must be non-negative".into(),
                ));
            }
            (
                Tensor::from_vec(1, 2, vec![-lambda1.ln(), -lambda2.ln()])?,
                false,
            )
        }
    };
    let s_cfg = TrainConfig {
        weight_decay: 0.0,
        ..tc.clone()
    };
    let mut s_state = AdamState::new(std::slice::from_ref(&s));
    let mut order = BatchOrder::new(train.len(), tc.batch_size, tc.seed);
    let rollout_ids: Vec<usize> = (0..cfg.rollout_batch).collect();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let tau = tc.tau.at(step, cfg.steps);
        let (lambda1, lambda2) = match cfg.weighting {
            LossWeighting::Fixed { lambda1, lambda2 } => (lambda1, lambda2),
            LossWeighting::Learnable { .. } => ((-s.data()[0]).exp(), (-s.data()[1]).exp()),
        };

        let batch = order.batch(step);
        let (l_llm, g_llm) = lm_batch_gradients(&gen, train, &batch)?;

        let step_seed = mix64(tc.seed, step as u64);
        let (valid_sum, mut g_valid, scored) =
            summed_gradients(gen.params(), &rollout_ids, |g, w, b| {
                let mut rng = stream_rng(step_seed, b as u64);
                let prompt = prompt_ids(&random_pool(&mut rng));
                let clf_w = clf.params().bind_frozen(g);
                let r = rollout(g, &gen, w, clf, &clf_w, &prompt, tau, cfg.max_len, &mut rng)?;
                match r.p_valid {
                    None => Ok(None),
                    Some(p) => {
                        let one = g.constant(Tensor::scalar(1.0));
                        Ok(Some(g.sub(one, p)?))
                    }
                }
            })?;
        let l_valid = if scored > 0 {
            valid_sum / scored as f64
        } else {
            f64::NAN
        };
        if !l_llm.is_finite() || (scored > 0 && !l_valid.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                what: "refinement loss",
            });
        }

        let mut grads = g_llm;
        if lambda1 != 1.0 {
            scale_all(&mut grads, lambda1);
        }
        if scored > 0 && lambda2 != 0.0 {
            scale_all(&mut g_valid, lambda2 / scored as f64);
            for (a, b) in grads.iter_mut().zip(&g_valid) {
                a.axpy(1.0, b);
            }
        }
        clip_global_norm(&mut grads, tc.grad_clip);
        adamw_step(
            gen.params_mut().tensors_mut(),
            &grads,
            &mut state,
            tc,
            &decay,
        );

        if learnable {
            // d/ds of λ·L + s with λ = exp(−s).
            let d2 = if scored > 0 {
                1.0 - lambda2 * l_valid
            } else {
                0.0
            };
            let gs = Tensor::from_vec(1, 2, vec![1.0 - lambda1 * l_llm, d2])?;
            adamw_step(
                std::slice::from_mut(&mut s),
                &[gs],
                &mut s_state,
                &s_cfg,
                &[false],
            );
        }

        history.push(RefineStep {
            step,
            l_llm,
            l_valid,
            lambda1,
            lambda2,
            mean_p_valid: 1.0 - l_valid,
        });
    }
    Ok((gen, RefineReport { steps: history }))
}

/// Finite-difference check of the straight-through path of a one-step
/// rollout scored by a small classifier.
///
/// The relaxation is anchored at the hard sample: the oracle scores
/// `ŷ + ỹ(l) − ỹ(l₀)`, which equals the straight-through forward value at
/// `l₀` and moves with the relaxed row. Differentiating it is what the
/// estimator claims to do.
pub fn anchored_st_gradcheck(seed: u64, tau: f64, eps: f64) -> Result<GradcheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = Classifier::new(small_classifier_config(), &mut rng)?;
    for t in clf.params_mut().tensors_mut() {
        t.axpy(1.0, &Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng));
    }
    let width = clf.config().vocab_size;
    let vocab = Vocabulary::get();
    let prefix: Vec<usize> = vocab
        .ids("C0 IN n1 ; L0")
        .expect("known tokens")
        .into_iter()
        .map(usize::from)
        .collect();
    let logits = Tensor::randn(1, width, 1.0, &mut rng);
    let noise = gumbel_noise(width, &mut rng);

    let noisy: Vec<f64> = logits
        .data()
        .iter()
        .zip(&noise)
        .map(|(l, z)| l + z)
        .collect();
    let hard = argmax(&noisy);
    let m = noisy[hard];
    let e: Vec<f64> = noisy.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    let offset = Tensor::from_fn(1, width, |_, c| f64::from(u8::from(c == hard)) - e[c] / z);

    let clf_ref = &clf;
    let score =
        move |g: &mut Graph<f64>, last: Var| -> Result<Var, crate::autodiff::AutodiffError> {
            let w = clf_ref.params().bind_frozen(g);
            let head = g.constant(Tensor::one_hot(&prefix, width));
            let dist = g.concat_rows(&[head, last])?;
            let p = clf_ref.forward_dist(g, &w, dist).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            let one = g.constant(Tensor::scalar(1.0));
            g.sub(one, p)
        };
    let relaxed = |g: &mut Graph<f64>, l: Var| -> Result<Var, crate::autodiff::AutodiffError> {
        let zc = g.constant(Tensor::from_vec(1, width, noise.clone())?);
        let noisy = g.add(l, zc)?;
        let scaled = g.scale(noisy, 1.0 / tau);
        Ok(g.softmax(scaled, Axis::Cols))
    };
    let st = |g: &mut Graph<f64>, v: &[Var]| {
        let soft = relaxed(g, v[0])?;
        let h = g.constant(Tensor::one_hot(&[hard], width));
        let row = g.straight_through(h, soft)?;
        score(g, row)
    };
    let oracle = |g: &mut Graph<f64>, v: &[Var]| {
        let soft = relaxed(g, v[0])?;
        let off = g.constant(offset.clone());
        let row = g.add(soft, off)?;
        score(g, row)
    };
    Ok(gradcheck_against(&[logits], eps, &st, &oracle)?)
}
