use circuitsynth::autodiff::check::{gradcheck, run_op_suite};
use circuitsynth::autodiff::{Axis, Graph, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
}

fn shaped() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_chain_gradients((m, k, n) in shaped(), seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(m, k, 1.0, &mut rng);
        let b = Tensor::randn(k, n, 1.0, &mut rng);
        let r = gradcheck(&[a, b], 1e-6, |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let s = g.gelu(p);
            let l = g.log_softmax(s, Axis::Cols);
            Ok(g.mean(l, None))
        }).unwrap();
        prop_assert!(r.max_rel_error < 1e-5, "{:?}", r);
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(3, 7)) {
        let mut g = Graph::<f64>::inference();
        let v = g.constant(x);
        let s = g.softmax(v, Axis::Cols);
        let out = g.value(s);
        for r in 0..3 {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_gradient_is_all_ones(x in tensor(4, 3)) {
        let mut g = Graph::new();
        let v = g.param(x);
        let s = g.sum(v, None);
        g.backward(s).unwrap();
        prop_assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn shared_inputs_accumulate_gradients(x in tensor(2, 5)) {
        // d/dx sum(x * x + x) = 2x + 1
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let y = g.add(sq, v).unwrap();
        let s = g.sum(y, None);
        g.backward(s).unwrap();
        for (d, x) in g.grad(v).unwrap().data().iter().zip(x.data()) {
            prop_assert!((d - (2.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_an_involution(x in tensor(3, 4)) {
        prop_assert_eq!(x.transpose().transpose(), x);
    }
}

#[test]
fn every_op_passes_gradcheck() {
    for seed in 0..3 {
        for (name, r) in run_op_suite(seed, 1e-6).unwrap() {
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }
}

#[test]
fn inference_graph_records_nothing() {
    let mut g = Graph::<f64>::inference();
    let a = g.constant(Tensor::ones(2, 2));
    let b = g.matmul(a, a).unwrap();
    assert_eq!(g.value(b).data(), &[2.0; 4]);
    assert!(!g.is_recording());
}

#[test]
fn single_precision_forward() {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::from_vec(1, 3, vec![1.0f32, 2.0, 3.0]).unwrap());
    let s = g.softmax(x, Axis::Cols);
    let sum: f32 = g.value(s).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}
