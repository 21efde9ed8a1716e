//! Central finite-difference gradient checking.

use crate::scalar::Real;

use super::{AutodiffError, Graph, Tensor, Var};

/// Denominator floor of the relative error, so that gradients that are
/// numerically zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// Largest discrepancy found by [`gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of the scalar built by `f` with respect to
/// each of `inputs` against central differences with step `eps`.
///
/// `f` must be deterministic: it is re-run for every perturbed entry.
pub fn gradcheck<T: Real>(
    inputs: &[Tensor<T>],
    eps: f64,
    f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var, AutodiffError>,
) -> Result<GradcheckReport, AutodiffError> {
    gradcheck_against(inputs, eps, &f, &f)
}

/// Loss builder used by the gradient checks.
pub type GraphLoss<'a, T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var, AutodiffError> + 'a;

/// Like [`gradcheck`], but takes the finite differences of `oracle` instead
/// of `f`. Used where `f`'s forward value deliberately differs from the
/// function whose gradient it propagates (straight-through estimators).
pub fn gradcheck_against<T: Real>(
    inputs: &[Tensor<T>],
    eps: f64,
    f: &GraphLoss<'_, T>,
    oracle: &GraphLoss<'_, T>,
) -> Result<GradcheckReport, AutodiffError> {
    let build = |values: &[Tensor<T>],
                 h: &GraphLoss<'_, T>|
     -> Result<(Graph<T>, Vec<Var>, Var), AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = h(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let eval = |values: &[Tensor<T>]| build(values, oracle);
    let (mut g, vars, loss) = build(inputs, f)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut values = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let x0 = input.data()[k];
            values[i].data_mut()[k] = x0 + T::lit(eps);
            let (g_plus, _, l_plus) = eval(&values)?;
            values[i].data_mut()[k] = x0 - T::lit(eps);
            let (g_minus, _, l_minus) = eval(&values)?;
            values[i].data_mut()[k] = x0;
            let numeric = (g_plus.value(l_plus).item().to_f64_lossy()
                - g_minus.value(l_minus).item().to_f64_lossy())
                / (2.0 * eps);
            let err = rel_error(analytic[i].data()[k].to_f64_lossy(), numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, k);
            }
        }
    }
    Ok(report)
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>;
type Case = (&'static str, Vec<Tensor<f64>>, LossFn);

/// Reduces `x` to a scalar through fixed random weights so every output
/// entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, AutodiffError> {
    use rand::SeedableRng;
    let [r, c] = g.shape(x);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::randn(r, c, 1.0, &mut rng));
    let y = g.mul(x, w)?;
    Ok(g.sum(y, None))
}

/// Inputs of shape `r×c` whose entries stay at least `0.1` away from zero
/// (so kinks like ReLU's are not straddled by the finite difference).
fn away_from_zero<R: rand::Rng>(r: usize, c: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::<f64>::randn(r, c, 1.0, rng).map(|v| {
        if v.abs() < 0.1 {
            v.signum() * 0.1 + v
        } else {
            v
        }
    })
}

/// The elementary-op gradcheck suite on random `3×4`-scale inputs.
pub fn op_cases(seed: u64) -> Vec<Case> {
    use super::Axis;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r, c| away_from_zero(r, c, &mut rng);
    let probs = |t: &Tensor<f64>| t.map(|v| 1.0 / (1.0 + (-v).exp()));
    let row_stochastic = |t: &Tensor<f64>| {
        let e = t.map(f64::exp);
        Tensor::from_fn(e.rows(), e.cols(), |r, c| {
            e.get(r, c) / e.row(r).iter().sum::<f64>()
        })
    };
    let p34 = probs(&m(3, 4));
    let d34 = row_stochastic(&m(3, 4));
    let cases: Vec<Case> = vec![
        (
            "add",
            vec![m(3, 4), m(3, 4)],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, 1)
            }),
        ),
        (
            "sub",
            vec![m(3, 4), m(3, 4)],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y, 2)
            }),
        ),
        (
            "mul",
            vec![m(3, 4), m(3, 4)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, 3)
            }),
        ),
        (
            "scale",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7);
                weighted_sum(g, y, 4)
            }),
        ),
        (
            "matmul",
            vec![m(3, 4), m(4, 2)],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 5)
            }),
        ),
        (
            "transpose",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.transpose(v[0]);
                weighted_sum(g, y, 6)
            }),
        ),
        (
            "slice_rows",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.slice_rows(v[0], 1, 2)?;
                weighted_sum(g, y, 7)
            }),
        ),
        (
            "slice_cols",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.slice_cols(v[0], 1, 2)?;
                weighted_sum(g, y, 8)
            }),
        ),
        (
            "concat_rows",
            vec![m(3, 4), m(1, 4)],
            Box::new(|g, v| {
                let y = g.concat_rows(&[v[0], v[1], v[0]])?;
                weighted_sum(g, y, 9)
            }),
        ),
        (
            "concat_cols",
            vec![m(3, 4), m(3, 2)],
            Box::new(|g, v| {
                let y = g.concat_cols(&[v[1], v[0]])?;
                weighted_sum(g, y, 10)
            }),
        ),
        (
            "broadcast_scalar",
            vec![m(1, 1)],
            Box::new(|g, v| {
                let y = g.broadcast(v[0], 3, 4)?;
                weighted_sum(g, y, 11)
            }),
        ),
        (
            "broadcast_row",
            vec![m(1, 4)],
            Box::new(|g, v| {
                let y = g.broadcast(v[0], 3, 4)?;
                weighted_sum(g, y, 12)
            }),
        ),
        (
            "broadcast_col",
            vec![m(3, 1)],
            Box::new(|g, v| {
                let y = g.broadcast(v[0], 3, 4)?;
                weighted_sum(g, y, 13)
            }),
        ),
        (
            "softmax_cols",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.softmax(v[0], Axis::Cols);
                weighted_sum(g, y, 14)
            }),
        ),
        (
            "softmax_rows",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.softmax(v[0], Axis::Rows);
                weighted_sum(g, y, 15)
            }),
        ),
        (
            "log_softmax_cols",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.log_softmax(v[0], Axis::Cols);
                weighted_sum(g, y, 16)
            }),
        ),
        (
            "log_softmax_rows",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.log_softmax(v[0], Axis::Rows);
                weighted_sum(g, y, 17)
            }),
        ),
        (
            "relu",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, 18)
            }),
        ),
        (
            "gelu",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y, 19)
            }),
        ),
        (
            "sigmoid",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.sigmoid(v[0]);
                weighted_sum(g, y, 20)
            }),
        ),
        (
            "exp",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.exp(v[0]);
                weighted_sum(g, y, 21)
            }),
        ),
        (
            "softplus",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.softplus(v[0]);
                weighted_sum(g, y, 22)
            }),
        ),
        (
            "layer_norm",
            vec![m(3, 4), m(1, 4), m(1, 4)],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, 23)
            }),
        ),
        (
            "sum_all",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.sum(v[0], None);
                weighted_sum(g, y, 24)
            }),
        ),
        (
            "sum_rows",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.sum(v[0], Some(Axis::Rows));
                weighted_sum(g, y, 25)
            }),
        ),
        (
            "sum_cols",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.sum(v[0], Some(Axis::Cols));
                weighted_sum(g, y, 26)
            }),
        ),
        (
            "mean_all",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.mean(v[0], None);
                weighted_sum(g, y, 27)
            }),
        ),
        (
            "mean_rows",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.mean(v[0], Some(Axis::Rows));
                weighted_sum(g, y, 28)
            }),
        ),
        (
            "mean_cols",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let y = g.mean(v[0], Some(Axis::Cols));
                weighted_sum(g, y, 29)
            }),
        ),
        (
            "embedding_lookup",
            vec![m(4, 3)],
            Box::new(|g, v| {
                let y = g.embedding_lookup(v[0], &[2, 0, 2, 3])?;
                weighted_sum(g, y, 30)
            }),
        ),
        (
            "soft_embedding",
            vec![d34.clone(), m(4, 3)],
            Box::new(|g, v| {
                let y = g.soft_embedding(v[0], v[1])?;
                weighted_sum(g, y, 31)
            }),
        ),
        (
            "cross_entropy",
            vec![m(3, 4)],
            Box::new(|g, v| g.cross_entropy(v[0], &[Some(2), None, Some(0)])),
        ),
        (
            "binary_cross_entropy",
            vec![p34],
            Box::new(|g, v| {
                g.binary_cross_entropy(
                    v[0],
                    &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0],
                )
            }),
        ),
        (
            "dropout",
            vec![m(3, 4)],
            Box::new(|g, v| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
                let y = g.dropout(v[0], 0.3, &mut rng)?;
                weighted_sum(g, y, 32)
            }),
        ),
    ];
    cases
}

/// Straight-through case: the analytic gradient of `sum(ST(h, s) ∘ W)` with
/// respect to `s` is checked against finite differences of `sum(s ∘ W)`.
pub fn straight_through_case(seed: u64) -> (Vec<Tensor<f64>>, LossFn, LossFn) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let e = Tensor::<f64>::randn(3, 4, 1.0, &mut rng).map(f64::exp);
    let soft = Tensor::from_fn(3, 4, |r, c| e.get(r, c) / e.row(r).iter().sum::<f64>());
    let hard_ids: Vec<usize> = (0..3).map(|r| soft.argmax_row(r)).collect();
    let hard = Tensor::one_hot(&hard_ids, 4);
    let st: LossFn = Box::new(move |g, v| {
        let h = g.constant(hard.clone());
        let y = g.straight_through(h, v[0])?;
        weighted_sum(g, y, 33)
    });
    let relaxed: LossFn = Box::new(|g, v| weighted_sum(g, v[0], 33));
    (vec![soft], st, relaxed)
}

/// Runs every case of [`op_cases`] plus the straight-through case and
/// returns `(name, report)` pairs.
pub fn run_op_suite(
    seed: u64,
    eps: f64,
) -> Result<Vec<(&'static str, GradcheckReport)>, AutodiffError> {
    let mut out: Vec<(&'static str, GradcheckReport)> = op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, gradcheck(&inputs, eps, f)?)))
        .collect::<Result<_, AutodiffError>>()?;
    let (inputs, st, relaxed) = straight_through_case(seed);
    out.push((
        "straight_through",
        gradcheck_against(&inputs, eps, &*st, &*relaxed)?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for (name, report) in run_op_suite(0, 1e-6).unwrap() {
            assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
            assert!(report.checked > 0, "{name}");
        }
    }
}
