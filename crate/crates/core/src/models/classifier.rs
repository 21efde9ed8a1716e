//! Validity classifier over netlist tokens.
//!
//! Inputs are distribution matrices `D` (`n × |V|`); id sequences become
//! exact one-hot rows and take the same path. Embeddings are `D E` plus
//! learned positions, followed by bidirectional blocks, mean pooling and a
//! two-layer head. Each attention head adds two structural score terms that
//! are differentiable in `D`:
//!
//! * token identity, `D diag(g_h) Dᵀ`, which lets a head link repeated net
//!   or device names;
//! * segment distance, `-softplus(γ_h) (s_i - s_j)²`, where `s = cumsum(D δ)`
//!   counts clause delimiters (`;` and `.`) up to each position.

use rand::Rng;

use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::encoding::{EncodingMode, TokenId, Vocabulary, MAX_SEQ_LEN};

use super::checkpoint::{config_entry, config_usize, CheckpointError, NamedTensors};
use super::generator::{decode_encoding, encoding_code, load_params};
use super::layers::{block, BlockIds};
use super::{linear, ModelError, Params};

/// Tolerance on the row sums of distribution inputs.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Tokens that end a clause or sentence.
pub const SEGMENT_DELIMITERS: [&str; 2] = [";", "."];

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Encoder blocks before pooling; `0` gives a plain pooled bag of embeddings.
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ff_mult: usize,
    pub encoding: EncodingMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocabulary::get().len(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: MAX_SEQ_LEN,
            ff_mult: 2,
            encoding: EncodingMode::Array,
        }
    }
}

/// Normal scale with the variance of a `±1/√fan_in` uniform.
fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (3.0 * fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
struct StructureIds {
    ident: usize,
    gamma: usize,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    cfg: ClassifierConfig,
    params: Params,
    tok: usize,
    pos: usize,
    blocks: Vec<(BlockIds, StructureIds)>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(cfg: ClassifierConfig, rng: &mut R) -> Result<Self, ModelError> {
        if cfg.d_model == 0 || cfg.n_heads == 0 || !cfg.d_model.is_multiple_of(cfg.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        let d = cfg.d_model;
        let mut p = Params::new();
        let tok = p.add("clf.tok_emb", Tensor::randn(cfg.vocab_size, d, 1.0, rng));
        let pos = p.add("clf.pos_emb", Tensor::randn(cfg.max_len, d, 1.0, rng));
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let prefix = format!("clf.block{l}");
                let ids = BlockIds::new(&mut p, &prefix, d, cfg.ff_mult * d, fan_in_std, rng);
                let s = StructureIds {
                    ident: p.add(
                        format!("{prefix}.attn.ident"),
                        Tensor::zeros(cfg.n_heads, cfg.vocab_size),
                    ),
                    gamma: p.add(
                        format!("{prefix}.attn.segment"),
                        Tensor::zeros(1, cfg.n_heads),
                    ),
                };
                (ids, s)
            })
            .collect();
        let w1 = p.add("clf.head.w1", Tensor::randn(d, d, fan_in_std(d), rng));
        let b1 = p.add("clf.head.b1", Tensor::zeros(1, d));
        // A zero output layer starts every prediction at exactly 0.5.
        let w2 = p.add("clf.head.w2", Tensor::zeros(d, 1));
        let b2 = p.add("clf.head.b2", Tensor::zeros(1, 1));
        Ok(Self {
            cfg,
            params: p,
            tok,
            pos,
            blocks,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// `p_valid` (`1×1`) for distribution rows `dist` (`n × |V|`).
    pub fn forward_dist(
        &self,
        g: &mut Graph<f64>,
        w: &[Var],
        dist: Var,
    ) -> Result<Var, ModelError> {
        let [n, v] = g.shape(dist);
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        if n > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: n,
                max: self.cfg.max_len,
            });
        }
        if v != self.cfg.vocab_size {
            return Err(crate::autodiff::AutodiffError::ShapeMismatch {
                op: "classifier input",
                left: [n, v],
                right: [n, self.cfg.vocab_size],
            }
            .into());
        }
        let d = g.value(dist);
        for r in 0..n {
            let sum: f64 = d.row(r).iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ModelError::NonStochasticRows { row: r, sum });
            }
        }

        let e = g.soft_embedding(dist, w[self.tok])?;
        let pos = g.slice_rows(w[self.pos], 0, n)?;
        let mut h = g.add(e, pos)?;
        if !self.blocks.is_empty() {
            let seg_dist = self.segment_distance(g, dist)?;
            let dist_t = g.transpose(dist);
            for (ids, s) in &self.blocks {
                let (ident, gamma) = (w[s.ident], w[s.gamma]);
                let mut bias = |g: &mut Graph<f64>, head: usize| {
                    let gh = g.slice_rows(ident, head, 1)?;
                    let dg = g.mul_broadcast(dist, gh)?;
                    let same = g.matmul(dg, dist_t)?;
                    let gm = g.slice_cols(gamma, head, 1)?;
                    let gm = g.softplus(gm);
                    let gm = g.broadcast(gm, n, n)?;
                    let far = g.mul(gm, seg_dist)?;
                    g.sub(same, far).map(Some)
                };
                h = block(g, w, ids, h, self.cfg.n_heads, None, &mut bias)?;
            }
        }
        let pooled = g.mean(h, Some(Axis::Rows));
        let z = linear(g, pooled, w[self.w1], w[self.b1])?;
        let z = g.gelu(z);
        let logit = linear(g, z, w[self.w2], w[self.b2])?;
        Ok(g.sigmoid(logit))
    }

    /// `(s_i - s_j)²` where `s` is the inclusive running count of delimiters.
    fn segment_distance(&self, g: &mut Graph<f64>, dist: Var) -> Result<Var, ModelError> {
        let n = g.shape(dist)[0];
        let vocab = Vocabulary::get();
        let delim: Vec<usize> = SEGMENT_DELIMITERS
            .iter()
            .filter_map(|t| vocab.id(t))
            .map(|i| i as usize)
            .filter(|&i| i < self.cfg.vocab_size)
            .collect();
        let delta = g.constant(Tensor::from_fn(self.cfg.vocab_size, 1, |r, _| {
            if delim.contains(&r) {
                1.0
            } else {
                0.0
            }
        }));
        let lower = g.constant(Tensor::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 }));
        let marks = g.matmul(dist, delta)?;
        let s = g.matmul(lower, marks)?;
        let sq = g.mul(s, s)?;
        let a = g.broadcast(sq, n, n)?;
        let sq_t = g.transpose(sq);
        let b = g.broadcast(sq_t, n, n)?;
        let s_t = g.transpose(s);
        let cross = g.matmul(s, s_t)?;
        let cross = g.scale(cross, 2.0);
        let ab = g.add(a, b)?;
        Ok(g.sub(ab, cross)?)
    }

    /// `p_valid` for a token id sequence; PAD ids are dropped.
    pub fn forward_ids(
        &self,
        g: &mut Graph<f64>,
        w: &[Var],
        ids: &[TokenId],
    ) -> Result<Var, ModelError> {
        let pad = Vocabulary::get().pad();
        let ids: Vec<usize> = ids
            .iter()
            .filter(|&&i| i != pad)
            .map(|&i| i as usize)
            .collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(crate::autodiff::AutodiffError::IndexOutOfRange {
                op: "classifier input",
                index: bad,
                bound: self.cfg.vocab_size,
            }
            .into());
        }
        let dist = g.constant(Tensor::one_hot(&ids, self.cfg.vocab_size));
        self.forward_dist(g, w, dist)
    }

    /// Inference-only `p_valid` for an id sequence.
    pub fn p_valid(&self, ids: &[TokenId]) -> Result<f64, ModelError> {
        let mut g = Graph::inference();
        let w = self.params.bind_frozen(&mut g);
        let p = self.forward_ids(&mut g, &w, ids)?;
        Ok(g.value(p).item())
    }

    pub fn to_checkpoint(&self) -> NamedTensors {
        let c = &self.cfg;
        let mut out = vec![
            config_entry("kind", 2.0),
            config_entry("vocab_size", c.vocab_size as f64),
            config_entry("d_model", c.d_model as f64),
            config_entry("n_layers", c.n_layers as f64),
            config_entry("n_heads", c.n_heads as f64),
            config_entry("max_len", c.max_len as f64),
            config_entry("ff_mult", c.ff_mult as f64),
            config_entry("encoding", encoding_code(c.encoding)),
        ];
        out.extend(
            self.params
                .names()
                .iter()
                .cloned()
                .zip(self.params.tensors().iter().cloned()),
        );
        out
    }

    pub fn from_checkpoint(tensors: &NamedTensors) -> Result<Self, ModelError> {
        if config_usize(tensors, "kind")? != 2 {
            return Err(CheckpointError::Malformed("not a classifier checkpoint".into()).into());
        }
        let cfg = ClassifierConfig {
            vocab_size: config_usize(tensors, "vocab_size")?,
            d_model: config_usize(tensors, "d_model")?,
            n_layers: config_usize(tensors, "n_layers")?,
            n_heads: config_usize(tensors, "n_heads")?,
            max_len: config_usize(tensors, "max_len")?,
            ff_mult: config_usize(tensors, "ff_mult")?,
            encoding: decode_encoding(config_usize(tensors, "encoding")?)?,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(cfg, &mut rng)?;
        load_params(&mut model.params, tensors)?;
        Ok(model)
    }
}
