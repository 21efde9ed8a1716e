//! Decoder-only transformer over the netlist vocabulary.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoding::{EncodingMode, TokenId, Vocabulary, MAX_SEQ_LEN};

use super::checkpoint::{self, config_entry, config_usize, CheckpointError, NamedTensors};
use super::layers::{block, BlockIds, LayerCache};
use super::{linear, ModelError, Params, INIT_STD, LN_EPS};

/// Score added to attention logits at masked (future) positions.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ff_mult: usize,
    /// Netlist encoding the model is trained on.
    pub encoding: EncodingMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocabulary::get().len(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: MAX_SEQ_LEN,
            ff_mult: 4,
            encoding: EncodingMode::NlIncident,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ff_mult == 0 {
            return Err(ModelError::InvalidConfig(
                "vocab_size, max_len and ff_mult must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Keys and values of all layers for the positions processed so far.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl KvCache {
    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: Params,
    tok: usize,
    pos: usize,
    blocks: Vec<BlockIds>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut p = Params::new();
        let tok = p.add(
            "lm.tok_emb",
            Tensor::randn(cfg.vocab_size, d, INIT_STD, rng),
        );
        let pos = p.add("lm.pos_emb", Tensor::randn(cfg.max_len, d, INIT_STD, rng));
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                BlockIds::new(
                    &mut p,
                    &format!("lm.block{l}"),
                    d,
                    cfg.ff_mult * d,
                    |_| INIT_STD,
                    rng,
                )
            })
            .collect();
        let lnf_g = p.add("lm.lnf.gain", Tensor::ones(1, d));
        let lnf_b = p.add("lm.lnf.bias", Tensor::zeros(1, d));
        let w_out = p.add("lm.w_out", Tensor::randn(d, cfg.vocab_size, INIT_STD, rng));
        let b_out = p.add("lm.b_out", Tensor::zeros(1, cfg.vocab_size));
        Ok(Self {
            cfg,
            params: p,
            tok,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    /// Token embedding rows for `ids`.
    pub fn embed_ids(
        &self,
        g: &mut Graph<f64>,
        w: &[Var],
        ids: &[TokenId],
    ) -> Result<Var, ModelError> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.embedding_lookup(w[self.tok], &ids)?)
    }

    /// Embedding of distribution rows (`n × |V|`).
    pub fn embed_soft(&self, g: &mut Graph<f64>, w: &[Var], dist: Var) -> Result<Var, ModelError> {
        Ok(g.soft_embedding(dist, w[self.tok])?)
    }

    /// Runs embedded rows at the next positions of `cache`, returning
    /// next-token logits (`n × |V|`) and extending the cache.
    pub fn forward_embedded(
        &self,
        g: &mut Graph<f64>,
        w: &[Var],
        x: Var,
        cache: &mut KvCache,
    ) -> Result<Var, ModelError> {
        let n = g.shape(x)[0];
        let start = cache.len;
        if start + n > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: start + n,
                max: self.cfg.max_len,
            });
        }
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        if cache.layers.is_empty() {
            cache.layers = vec![LayerCache::default(); self.blocks.len()];
        }
        let pos = g.slice_rows(w[self.pos], start, n)?;
        let mut h = g.add(x, pos)?;
        let mask = if n > 1 {
            let total = start + n;
            Some(g.constant(Tensor::from_fn(n, total, |i, j| {
                if j > start + i {
                    MASKED
                } else {
                    0.0
                }
            })))
        } else {
            None
        };
        for (ids, layer) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            h = block(g, w, ids, h, self.cfg.n_heads, Some(layer), &mut |_, _| {
                Ok(mask)
            })?;
        }
        cache.len += n;
        let h = g.layer_norm(h, w[self.lnf_g], w[self.lnf_b], LN_EPS)?;
        Ok(linear(g, h, w[self.w_out], w[self.b_out])?)
    }

    /// Logits for every position of `ids` (row `t` scores token `t + 1`).
    pub fn lm_forward(
        &self,
        g: &mut Graph<f64>,
        w: &[Var],
        ids: &[TokenId],
    ) -> Result<Var, ModelError> {
        if ids.len() > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        let x = self.embed_ids(g, w, ids)?;
        self.forward_embedded(g, w, x, &mut KvCache::default())
    }

    /// Mean negative log-likelihood of the tokens after the first
    /// `prompt_len` positions, under teacher forcing.
    pub fn lm_nll(
        &self,
        g: &mut Graph<f64>,
        w: &[Var],
        seq: &[TokenId],
        prompt_len: usize,
    ) -> Result<Var, ModelError> {
        if seq.len() < 2 || prompt_len >= seq.len() {
            return Err(ModelError::EmptyTarget);
        }
        let pad = Vocabulary::get().pad();
        let logits = self.lm_forward(g, w, &seq[..seq.len() - 1])?;
        let targets: Vec<Option<usize>> = (1..seq.len())
            .map(|t| (t >= prompt_len && seq[t] != pad).then_some(seq[t] as usize))
            .collect();
        if targets.iter().all(Option::is_none) {
            return Err(ModelError::EmptyTarget);
        }
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Inference-only logits for `ids`.
    pub fn logits(&self, ids: &[TokenId]) -> Result<Tensor<f64>, ModelError> {
        let mut g = Graph::inference();
        let w = self.params.bind_frozen(&mut g);
        let out = self.lm_forward(&mut g, &w, ids)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> NamedTensors {
        let c = &self.cfg;
        let mut out = vec![
            config_entry("kind", 1.0),
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
        if checkpoint::config_usize(tensors, "kind")? != 1 {
            return Err(CheckpointError::Malformed("not a generator checkpoint".into()).into());
        }
        let cfg = GeneratorConfig {
            vocab_size: config_usize(tensors, "vocab_size")?,
            d_model: config_usize(tensors, "d_model")?,
            n_layers: config_usize(tensors, "n_layers")?,
            n_heads: config_usize(tensors, "n_heads")?,
            max_len: config_usize(tensors, "max_len")?,
            ff_mult: config_usize(tensors, "ff_mult")?,
            encoding: decode_encoding(config_usize(tensors, "encoding")?)?,
        };
        let mut model = Self::new(
            cfg,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        load_params(&mut model.params, tensors)?;
        Ok(model)
    }
}

pub(crate) fn encoding_code(mode: EncodingMode) -> f64 {
    match mode {
        EncodingMode::NlIncident => 0.0,
        EncodingMode::Array => 1.0,
    }
}

pub(crate) fn decode_encoding(code: usize) -> Result<EncodingMode, CheckpointError> {
    match code {
        0 => Ok(EncodingMode::NlIncident),
        1 => Ok(EncodingMode::Array),
        other => Err(CheckpointError::Malformed(format!(
            "unknown encoding code {other}"
        ))),
    }
}

/// Overwrites every parameter with the same-named checkpoint tensor.
pub(crate) fn load_params(
    params: &mut Params,
    tensors: &NamedTensors,
) -> Result<(), CheckpointError> {
    let names = params.names().to_vec();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = checkpoint::find(tensors, name)?;
        if t.shape() != slot.shape() {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                found: t.shape(),
                expected: slot.shape(),
            });
        }
        *slot = t.clone();
    }
    Ok(())
}
