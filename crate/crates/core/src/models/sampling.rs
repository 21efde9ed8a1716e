//! Temperature, top-k and nucleus filtered ancestral sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::autodiff::Graph;
use crate::encoding::{TokenId, TokenSequence, Vocabulary, MAX_SEQ_LEN};

use super::generator::{Generator, KvCache};
use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    /// Cap on the total sequence length, prompt included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 40,
            top_p: 0.95,
            max_len: MAX_SEQ_LEN,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::InvalidDecode(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(ModelError::InvalidDecode("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::InvalidDecode(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_len == 0 {
            return Err(ModelError::InvalidDecode("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Next-token probabilities after temperature scaling, top-k truncation and
/// nucleus truncation, renormalized.
pub fn filtered_distribution(logits: &[f64], cfg: &DecodeConfig) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / cfg.temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    let probs: Vec<f64> = exp.iter().map(|&e| e / z).collect();

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.min(order.len()));
    let kept_mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut cumulative = 0.0;
    let mut keep = 0;
    for &i in &order {
        cumulative += probs[i] / kept_mass;
        keep += 1;
        if cumulative >= cfg.top_p {
            break;
        }
    }
    order.truncate(keep);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    out
}

/// Draws an index from `probs`.
pub fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(probs)
        .map(|d| d.sample(rng))
        .unwrap_or_else(|_| {
            // Degenerate weights can only come from non-finite logits.
            probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i)
        })
}

/// Continues `prompt` until EOS or `cfg.max_len` total tokens.
pub fn sample<R: Rng + ?Sized>(
    model: &Generator,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<TokenSequence, ModelError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let limit = cfg.max_len.min(model.config().max_len);
    let eos = Vocabulary::get().eos();
    let mut g = Graph::inference();
    let w = model.params().bind_frozen(&mut g);
    let mut cache = KvCache::default();
    let mut seq = prompt.to_vec();
    let x = model.embed_ids(&mut g, &w, prompt)?;
    let mut logits = model.forward_embedded(&mut g, &w, x, &mut cache)?;
    while seq.len() < limit {
        let rows = g.shape(logits)[0];
        let last = g.value(logits).row(rows - 1).to_vec();
        let next = draw(&filtered_distribution(&last, cfg), rng) as TokenId;
        seq.push(next);
        if next == eos || seq.len() >= limit {
            break;
        }
        let x = model.embed_ids(&mut g, &w, &[next])?;
        logits = model.forward_embedded(&mut g, &w, x, &mut cache)?;
    }
    Ok(TokenSequence(seq))
}

/// The generated continuation after the prompt, without the trailing EOS.
pub fn continuation(seq: &[TokenId], prompt_len: usize) -> &[TokenId] {
    let body = &seq[prompt_len.min(seq.len())..];
    let eos = Vocabulary::get().eos();
    match body.iter().position(|&t| t == eos) {
        Some(i) => &body[..i],
        None => body,
    }
}
