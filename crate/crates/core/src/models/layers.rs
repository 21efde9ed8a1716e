//! Pre-layer-norm transformer block shared by both models.

use rand::Rng;

use crate::autodiff::{AutodiffError, Axis, Graph, Tensor, Var};

use super::{linear, Params, LN_EPS};

/// Parameter indices of one block.
#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_ff1: usize,
    b_ff1: usize,
    w_ff2: usize,
    b_ff2: usize,
}

impl BlockIds {
    /// `weight_std(fan_in)` sets the normal init scale of each weight matrix.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        prefix: &str,
        d: usize,
        ff: usize,
        weight_std: fn(usize) -> f64,
        rng: &mut R,
    ) -> Self {
        let mut add = |name: &str, t| params.add(format!("{prefix}.{name}"), t);
        Self {
            ln1_g: add("ln1.gain", Tensor::ones(1, d)),
            ln1_b: add("ln1.bias", Tensor::zeros(1, d)),
            w_qkv: add("attn.w_qkv", Tensor::randn(d, 3 * d, weight_std(d), rng)),
            b_qkv: add("attn.b_qkv", Tensor::zeros(1, 3 * d)),
            w_o: add("attn.w_o", Tensor::randn(d, d, weight_std(d), rng)),
            b_o: add("attn.b_o", Tensor::zeros(1, d)),
            ln2_g: add("ln2.gain", Tensor::ones(1, d)),
            ln2_b: add("ln2.bias", Tensor::zeros(1, d)),
            w_ff1: add("ff.w1", Tensor::randn(d, ff, weight_std(d), rng)),
            b_ff1: add("ff.b1", Tensor::zeros(1, ff)),
            w_ff2: add("ff.w2", Tensor::randn(ff, d, weight_std(ff), rng)),
            b_ff2: add("ff.b2", Tensor::zeros(1, d)),
        }
    }
}

/// Keys and values of earlier positions for one block.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    pub k: Option<Var>,
    pub v: Option<Var>,
}

/// Applies one block to the `n×d` rows `h`.
///
/// With a cache, the new keys and values are appended to it and attention
/// spans the cached rows plus the new ones. `bias(g, head)` may return an
/// additive score matrix (`n × total`) for that head.
#[allow(clippy::type_complexity)]
pub(crate) fn block(
    g: &mut Graph<f64>,
    w: &[Var],
    ids: &BlockIds,
    h: Var,
    n_heads: usize,
    cache: Option<&mut LayerCache>,
    bias: &mut dyn FnMut(&mut Graph<f64>, usize) -> Result<Option<Var>, AutodiffError>,
) -> Result<Var, AutodiffError> {
    let d = g.shape(h)[1];
    let dh = d / n_heads;
    let a = g.layer_norm(h, w[ids.ln1_g], w[ids.ln1_b], LN_EPS)?;
    let qkv = linear(g, a, w[ids.w_qkv], w[ids.b_qkv])?;
    let q = g.slice_cols(qkv, 0, d)?;
    let mut k = g.slice_cols(qkv, d, d)?;
    let mut v = g.slice_cols(qkv, 2 * d, d)?;
    if let Some(c) = cache {
        if let (Some(pk), Some(pv)) = (c.k, c.v) {
            k = g.concat_rows(&[pk, k])?;
            v = g.concat_rows(&[pv, v])?;
        }
        c.k = Some(k);
        c.v = Some(v);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for hh in 0..n_heads {
        let qh = g.slice_cols(q, hh * dh, dh)?;
        let kh = g.slice_cols(k, hh * dh, dh)?;
        let vh = g.slice_cols(v, hh * dh, dh)?;
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, scale);
        if let Some(b) = bias(g, hh)? {
            s = g.add(s, b)?;
        }
        let p = g.softmax(s, Axis::Cols);
        heads.push(g.matmul(p, vh)?);
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let o = linear(g, o, w[ids.w_o], w[ids.b_o])?;
    let h = g.add(h, o)?;
    let f = g.layer_norm(h, w[ids.ln2_g], w[ids.ln2_b], LN_EPS)?;
    let f = linear(g, f, w[ids.w_ff1], w[ids.b_ff1])?;
    let f = g.gelu(f);
    let f = linear(g, f, w[ids.w_ff2], w[ids.b_ff2])?;
    g.add(h, f)
}
