//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Graph`] records every operation in insertion order; [`Graph::backward`]
//! walks the tape in reverse once. Leaves created with [`Graph::param`]
//! accumulate gradients across calls until [`Graph::zero_grads`].

pub mod check;
mod tensor;

use rand::Rng;
use thiserror::Error;

use crate::scalar::Real;

use tensor::gemm_acc;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("gradient recording is disabled on this graph")]
    GradDisabled,
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis: `Axis::Rows` reduces down each column (result `1×c`),
/// `Axis::Cols` reduces along each row (result `r×1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Broadcast(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var, Option<Axis>),
    Mean(Var, Option<Axis>),
    Embedding(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Bce {
        p: Var,
        labels: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    StraightThrough {
        soft: Var,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    record: bool,
    non_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
/// Probability clamp for binary cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

fn shape_err(op: &'static str, left: [usize; 2], right: [usize; 2]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left, right }
}

impl<T: Real> Graph<T> {
    /// A graph that records operations for [`backward`](Self::backward).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
            non_finite: false,
        }
    }

    /// A graph that computes values only.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether any value computed so far contains NaN or infinity.
    pub fn non_finite(&self) -> bool {
        self.non_finite
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).cloned().unwrap_or_else(|| {
            let [r, c] = self.shape(v);
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if !self.non_finite && !value.is_finite() {
            self.non_finite = true;
        }
        let (op, requires_grad) = if self.record {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(())
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        tag: Op<T>,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, tag, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, tag: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, tag, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Distribution-weighted embedding: `dist × table`.
    pub fn soft_embedding(&mut self, dist: Var, table: Var) -> Result<Var> {
        self.matmul(dist, table)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.rows() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: v.rows(),
            });
        }
        let out = Tensor::from_vec(
            len,
            v.cols(),
            v.data()[start * v.cols()..(start + len) * v.cols()].to_vec(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.cols() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: v.cols(),
            });
        }
        let out = Tensor::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat_rows",
                message: "no inputs".into(),
            })?;
        let cols = self.shape(first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat_cols",
                message: "no inputs".into(),
            })?;
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + v.cols()]
                    .copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Repeats a `1×1`, `1×c` or `r×1` tensor to `rows×cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a);
        let [r, c] = v.shape();
        if !((r == rows || r == 1) && (c == cols || c == 1)) {
            return Err(shape_err("broadcast", v.shape(), [rows, cols]));
        }
        let out = Tensor::from_fn(rows, cols, |i, j| {
            v.get(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })
        });
        let rg = self.rg(a);
        Ok(self.push(out, Op::Broadcast(a), rg))
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let b = if self.shape(b) == [r, c] {
            b
        } else {
            self.broadcast(b, r, c)?
        };
        self.add(a, b)
    }

    /// `a ∘ b` with `b` broadcast to the shape of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let b = if self.shape(b) == [r, c] {
            b
        } else {
            self.broadcast(b, r, c)?
        };
        self.mul(a, b)
    }

    fn lanes(shape: [usize; 2], axis: Axis) -> (usize, usize, usize, usize) {
        // (lane count, lane length, lane stride, element stride)
        match axis {
            Axis::Cols => (shape[0], shape[1], shape[1], 1),
            Axis::Rows => (shape[1], shape[0], 1, shape[1]),
        }
    }

    fn softmax_value(x: &Tensor<T>, axis: Axis, log: bool) -> Tensor<T> {
        let (n, len, ls, es) = Self::lanes(x.shape(), axis);
        let mut out = x.clone();
        let d = out.data_mut();
        for lane in 0..n {
            let idx = |i: usize| lane * ls + i * es;
            let mut m = T::neg_infinity();
            for i in 0..len {
                m = m.max(d[idx(i)]);
            }
            let mut s = T::zero();
            for i in 0..len {
                s += (d[idx(i)] - m).exp();
            }
            let ls_ = s.ln() + m;
            for i in 0..len {
                let k = idx(i);
                d[k] = if log {
                    d[k] - ls_
                } else {
                    (d[k] - m).exp() / s
                };
            }
        }
        out
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let out = Self::softmax_value(self.value(a), axis, false);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a, axis), rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Var {
        let out = Self::softmax_value(self.value(a), axis, true);
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a, axis), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        self.unary(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != [1, cols] {
                return Err(shape_err("layer_norm", [rows, cols], self.shape(p)));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = T::from_usize_lossy(cols);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            let inv = T::one() / (var / n + eps).sqrt();
            inv_std.push(inv);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn reduce(x: &Tensor<T>, axis: Option<Axis>) -> Tensor<T> {
        match axis {
            None => Tensor::scalar(x.sum()),
            Some(ax) => {
                let (n, len, ls, es) = Self::lanes(x.shape(), ax);
                let data: Vec<T> = (0..n)
                    .map(|lane| {
                        let mut acc = T::zero();
                        for i in 0..len {
                            acc += x.data()[lane * ls + i * es];
                        }
                        acc
                    })
                    .collect();
                match ax {
                    Axis::Rows => Tensor::from_vec(1, n, data),
                    Axis::Cols => Tensor::from_vec(n, 1, data),
                }
                .expect("lane count matches")
            }
        }
    }

    fn reduce_count(shape: [usize; 2], axis: Option<Axis>) -> usize {
        match axis {
            None => shape[0] * shape[1],
            Some(Axis::Rows) => shape[0],
            Some(Axis::Cols) => shape[1],
        }
    }

    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Var {
        let out = Self::reduce(self.value(a), axis);
        let rg = self.rg(a);
        self.push(out, Op::Sum(a, axis), rg)
    }

    pub fn mean(&mut self, a: Var, axis: Option<Axis>) -> Var {
        let n = T::from_usize_lossy(Self::reduce_count(self.shape(a), axis).max(1));
        let out = Self::reduce(self.value(a), axis).map(|v| v / n);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a, axis), rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "embedding_lookup",
                index: bad,
                bound: t.rows(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(ids.len(), t.cols(), data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows with `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let [rows, cols] = self.shape(logits);
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", [rows, cols], [targets.len(), 1]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                message: "no target positions".into(),
            });
        }
        let logp = Self::softmax_value(self.value(logits), Axis::Cols, true);
        let mut nll = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= cols {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: cols,
                    });
                }
                nll -= logp.get(r, t);
            }
        }
        let probs = logp.map(|v| v.exp()).into_data();
        let out = Tensor::scalar(nll / T::from_usize_lossy(count));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`
    /// (row-major order); `p` is clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let v = self.value(p);
        if labels.len() != v.len() || labels.is_empty() {
            return Err(shape_err(
                "binary_cross_entropy",
                v.shape(),
                [labels.len(), 1],
            ));
        }
        let eps = T::lit(BCE_EPS);
        let mut loss = T::zero();
        for (&pi, &y) in v.data().iter().zip(labels) {
            let q = pi.max(eps).min(T::one() - eps);
            loss -= y * q.ln() + (T::one() - y) * (T::one() - q).ln();
        }
        let out = Tensor::scalar(loss / T::from_usize_lossy(labels.len()));
        let rg = self.rg(p);
        Ok(self.push(
            out,
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// the rest. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                message: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Forward value of `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        self.same_shape("straight_through", hard, soft)?;
        let out = self.value(hard).clone();
        let rg = self.rg(soft);
        Ok(self.push(out, Op::StraightThrough { soft }, rg))
    }

    fn acc(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.axpy(T::one(), &g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&mut self, v: Var, shape: [usize; 2], f: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        f(g);
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(AutodiffError::GradDisabled);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        self.acc(loss, Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Tensor<T>) {
        // The op is moved out temporarily so input gradients can be written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = elementwise(&g, self.value(b), |x, y| x * y);
                let gb = elementwise(&g, self.value(a), |x, y| x * y);
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, g.map(|x| x * c));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let mut ga = Tensor::zeros(self.shape(a)[0], self.shape(a)[1]);
                    gemm_acc(&g, false, self.value(b), true, &mut ga);
                    self.acc(a, ga);
                }
                if self.rg(b) {
                    let mut gb = Tensor::zeros(self.shape(b)[0], self.shape(b)[1]);
                    gemm_acc(self.value(a), true, &g, false, &mut gb);
                    self.acc(b, gb);
                }
            }
            Op::Transpose(a) => self.acc(*a, g.transpose()),
            Op::SliceRows(a, start) => {
                let (a, start) = (*a, *start);
                let shape = self.shape(a);
                self.acc_with(a, shape, |ga| {
                    let cols = shape[1];
                    for (d, &s) in ga.data_mut()[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *d += s;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                let shape = self.shape(a);
                self.acc_with(a, shape, |ga| {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let k = r * shape[1] + start + c;
                            ga.data_mut()[k] += g.get(r, c);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [r, c] = self.shape(p);
                    let piece =
                        Tensor::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec())
                            .expect("slice");
                    offset += r;
                    self.acc(p, piece);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [r, c] = self.shape(p);
                    let piece = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                    offset += c;
                    self.acc(p, piece);
                }
            }
            Op::Broadcast(a) => {
                let a = *a;
                let [r, c] = self.shape(a);
                let reduced = match (r == g.rows(), c == g.cols()) {
                    (true, true) => g,
                    (true, false) => Self::reduce(&g, Some(Axis::Cols)),
                    (false, true) => Self::reduce(&g, Some(Axis::Rows)),
                    (false, false) => Tensor::scalar(g.sum()),
                };
                self.acc(a, reduced);
            }
            Op::Softmax(a, axis) => {
                let y = &self.nodes[i].value;
                let (n, len, ls, es) = Self::lanes(y.shape(), *axis);
                let mut ga = g.clone();
                for lane in 0..n {
                    let mut dot = T::zero();
                    for k in 0..len {
                        let idx = lane * ls + k * es;
                        dot += g.data()[idx] * y.data()[idx];
                    }
                    for k in 0..len {
                        let idx = lane * ls + k * es;
                        ga.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
                self.acc(*a, ga);
            }
            Op::LogSoftmax(a, axis) => {
                let y = &self.nodes[i].value;
                let (n, len, ls, es) = Self::lanes(y.shape(), *axis);
                let mut ga = g.clone();
                for lane in 0..n {
                    let mut total = T::zero();
                    for k in 0..len {
                        total += g.data()[lane * ls + k * es];
                    }
                    for k in 0..len {
                        let idx = lane * ls + k * es;
                        ga.data_mut()[idx] = g.data()[idx] - y.data()[idx].exp() * total;
                    }
                }
                self.acc(*a, ga);
            }
            Op::Relu(a) => {
                let ga = elementwise(&g, self.value(*a), |gi, x| {
                    if x > T::zero() {
                        gi
                    } else {
                        T::zero()
                    }
                });
                self.acc(*a, ga);
            }
            Op::Gelu(a) => {
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let ga = elementwise(&g, self.value(*a), |gi, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
                    gi * d
                });
                self.acc(*a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = elementwise(&g, &self.nodes[i].value, |gi, y| gi * y * (T::one() - y));
                self.acc(*a, ga);
            }
            Op::Exp(a) => {
                let ga = elementwise(&g, &self.nodes[i].value, |gi, y| gi * y);
                self.acc(*a, ga);
            }
            Op::Softplus(a) => {
                let ga = elementwise(&g, self.value(*a), |gi, x| gi * sigmoid(x));
                self.acc(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let [rows, cols] = g.shape();
                let gv = self.value(*gain).clone();
                let n = T::from_usize_lossy(cols);
                let mut gx = Tensor::zeros(rows, cols);
                let mut ggain = Tensor::zeros(1, cols);
                let mut gbias = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for c in 0..cols {
                        let gi = g.get(r, c);
                        let h = xhat[r * cols + c];
                        ggain.data_mut()[c] += gi * h;
                        gbias.data_mut()[c] += gi;
                        let gh = gi * gv.data()[c];
                        s1 += gh;
                        s2 += gh * h;
                    }
                    for c in 0..cols {
                        let h = xhat[r * cols + c];
                        let gh = g.get(r, c) * gv.data()[c];
                        gx.set(r, c, inv_std[r] / n * (n * gh - s1 - h * s2));
                    }
                }
                self.acc(*x, gx);
                self.acc(*gain, ggain);
                self.acc(*bias, gbias);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (a, axis) = (*a, *axis);
                let [r, c] = self.shape(a);
                let scale = if matches!(op, Op::Mean(..)) {
                    T::one() / T::from_usize_lossy(Self::reduce_count([r, c], axis).max(1))
                } else {
                    T::one()
                };
                let ga = Tensor::from_fn(r, c, |i, j| {
                    scale
                        * match axis {
                            None => g.item(),
                            Some(Axis::Rows) => g.get(0, j),
                            Some(Axis::Cols) => g.get(i, 0),
                        }
                });
                self.acc(a, ga);
            }
            Op::Embedding(table, ids) => {
                let table = *table;
                let shape = self.shape(table);
                self.acc_with(table, shape, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * shape[1]..(id + 1) * shape[1]];
                        for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let [rows, cols] = self.shape(*logits);
                let w = g.item() / T::from_usize_lossy(*count);
                let mut gl = Tensor::zeros(rows, cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..cols {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gl.set(r, c, w * (probs[r * cols + c] - onehot));
                        }
                    }
                }
                self.acc(*logits, gl);
            }
            Op::Bce { p, labels } => {
                let eps = T::lit(BCE_EPS);
                let w = g.item() / T::from_usize_lossy(labels.len());
                let v = self.value(*p);
                let data = v
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &y)| {
                        let q = pi.max(eps).min(T::one() - eps);
                        w * (q - y) / (q * (T::one() - q))
                    })
                    .collect();
                let gp = Tensor::from_vec(v.rows(), v.cols(), data).expect("shape");
                self.acc(*p, gp);
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                self.acc(
                    *a,
                    Tensor::from_vec(g.rows(), g.cols(), data).expect("shape"),
                );
            }
            Op::StraightThrough { soft } => self.acc(*soft, g),
        }
        self.nodes[i].op = op;
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("matching shapes")
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
