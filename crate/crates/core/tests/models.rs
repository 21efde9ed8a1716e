use circuitsynth::autodiff::{Graph, Tensor};
use circuitsynth::encoding::{TokenId, Vocabulary};
use circuitsynth::models::check::{
    clf_loss_gradcheck, lm_loss_gradcheck, small_classifier_config, small_generator_config,
};
use circuitsynth::models::checkpoint;
use circuitsynth::models::sampling::{continuation, filtered_distribution, sample};
use circuitsynth::models::{Classifier, DecodeConfig, Generator, KvCache, ModelError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noisy_generator(seed: u64) -> Generator {
    let mut r = rng(seed);
    let mut m = Generator::new(small_generator_config(), &mut r).unwrap();
    for t in m.params_mut().tensors_mut() {
        t.axpy(1.0, &Tensor::randn(t.rows(), t.cols(), 0.3, &mut r));
    }
    m
}

fn ids(text: &str) -> Vec<TokenId> {
    Vocabulary::get().ids(text).unwrap()
}

#[test]
fn generator_is_causal() {
    let m = noisy_generator(1);
    let a = ids("<bos> C0 , L0 <sep> C0 IN OUT ; L0");
    let k = 5;
    let mut b = a.clone();
    b[k] = Vocabulary::get().id("n3").unwrap();
    let la = m.logits(&a).unwrap();
    let lb = m.logits(&b).unwrap();
    for r in 0..a.len() {
        let same = la.row(r) == lb.row(r);
        assert_eq!(same, r < k, "row {r}");
    }
}

#[test]
fn generator_rows_normalize() {
    let m = noisy_generator(2);
    let l = m.logits(&ids("<bos> C0 , Sa0 <sep>")).unwrap();
    for r in 0..l.rows() {
        let row = l.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        let total: f64 = row.iter().map(|x| (x - mx).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_output_layer_gives_uniform_loss() {
    let mut m = Generator::new(small_generator_config(), &mut rng(3)).unwrap();
    let wi = m.params().index_of("lm.w_out").unwrap();
    let t = m.params().get(wi).clone();
    m.params_mut().tensors_mut()[wi] = Tensor::zeros(t.rows(), t.cols());
    let mut g = Graph::new();
    let w = m.params().bind(&mut g);
    let seq = ids("<bos> C0 <sep> C0 IN OUT <eos>");
    let loss = m.lm_nll(&mut g, &w, &seq, 3).unwrap();
    let expect = (Vocabulary::get().len() as f64).ln();
    assert!((g.value(loss).item() - expect).abs() < 1e-12);
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let m = noisy_generator(4);
    let seq = ids("<bos> C0 , L0 , Sa0 <sep> C0 IN n1 ; L0");
    let full = m.logits(&seq).unwrap();
    let mut g = Graph::inference();
    let w = m.params().bind_frozen(&mut g);
    let mut cache = KvCache::default();
    let x = m.embed_ids(&mut g, &w, &seq[..4]).unwrap();
    let first = m.forward_embedded(&mut g, &w, x, &mut cache).unwrap();
    for r in 0..4 {
        for (a, b) in g.value(first).row(r).iter().zip(full.row(r)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    for (t, &tok) in seq.iter().enumerate().skip(4) {
        let x = m.embed_ids(&mut g, &w, &[tok]).unwrap();
        let out = m.forward_embedded(&mut g, &w, x, &mut cache).unwrap();
        for (a, b) in g.value(out).row(0).iter().zip(full.row(t)) {
            assert!((a - b).abs() < 1e-10, "position {t}");
        }
    }
}

#[test]
fn generator_rejects_overlong_input() {
    let m = noisy_generator(5);
    let long = vec![Vocabulary::get().bos(); m.config().max_len + 1];
    assert!(matches!(
        m.logits(&long),
        Err(ModelError::SequenceTooLong { .. })
    ));
}

#[test]
fn classifier_starts_at_one_half() {
    let c = Classifier::new(small_classifier_config(), &mut rng(6)).unwrap();
    let p = c.p_valid(&ids("C0 IN OUT ; L0 OUT 0")).unwrap();
    assert_eq!(p, 0.5);
}

#[test]
fn one_hot_input_matches_id_path() {
    let mut c = Classifier::new(small_classifier_config(), &mut rng(7)).unwrap();
    let mut r = rng(8);
    for t in c.params_mut().tensors_mut() {
        t.axpy(1.0, &Tensor::randn(t.rows(), t.cols(), 0.3, &mut r));
    }
    let seq = ids("C0 IN n1 ; L0 n1 OUT ; Sa0 n1 0");
    let by_id = c.p_valid(&seq).unwrap();
    let mut g = Graph::inference();
    let w = c.params().bind_frozen(&mut g);
    let hot: Vec<usize> = seq.iter().map(|&i| i as usize).collect();
    let d = g.constant(Tensor::one_hot(&hot, c.config().vocab_size));
    let p = c.forward_dist(&mut g, &w, d).unwrap();
    assert_eq!(g.value(p).item().to_bits(), by_id.to_bits());
}

#[test]
fn classifier_rejects_non_stochastic_rows() {
    let c = Classifier::new(small_classifier_config(), &mut rng(9)).unwrap();
    let mut g = Graph::inference();
    let w = c.params().bind_frozen(&mut g);
    let d = g.constant(Tensor::full(3, c.config().vocab_size, 0.5));
    assert!(matches!(
        c.forward_dist(&mut g, &w, d),
        Err(ModelError::NonStochasticRows { row: 0, .. })
    ));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let lm = lm_loss_gradcheck(11, 1e-6).unwrap();
    assert!(lm.max_rel_error < 1e-5, "lm {lm:?}");
    let clf = clf_loss_gradcheck(12, 1e-6).unwrap();
    assert!(clf.max_rel_error < 1e-5, "classifier {clf:?}");
}

#[test]
fn checkpoints_roundtrip_bitwise() {
    let m = noisy_generator(13);
    let mut buf = Vec::new();
    checkpoint::write_to(&mut buf, &m.to_checkpoint()).unwrap();
    let back = Generator::from_checkpoint(&checkpoint::read_from(&buf[..]).unwrap()).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params().to_bytes(), m.params().to_bytes());

    let c = Classifier::new(small_classifier_config(), &mut rng(14)).unwrap();
    let mut buf = Vec::new();
    checkpoint::write_to(&mut buf, &c.to_checkpoint()).unwrap();
    let back = Classifier::from_checkpoint(&checkpoint::read_from(&buf[..]).unwrap()).unwrap();
    assert_eq!(back.params().to_bytes(), c.params().to_bytes());
    assert!(Generator::from_checkpoint(&c.to_checkpoint()).is_err());
}

#[test]
fn top_k_one_is_greedy() {
    let logits = [0.3, 2.0, -1.0, 1.9];
    let cfg = DecodeConfig {
        top_k: 1,
        ..DecodeConfig::default()
    };
    assert_eq!(
        filtered_distribution(&logits, &cfg),
        vec![0.0, 1.0, 0.0, 0.0]
    );
}

#[test]
fn nucleus_keeps_smallest_covering_set() {
    // Softmax of ln-probabilities recovers them exactly up to rounding.
    let probs: [f64; 4] = [0.5, 0.3, 0.15, 0.05];
    let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let cfg = DecodeConfig {
        top_k: 4,
        top_p: 0.75,
        ..DecodeConfig::default()
    };
    let out = filtered_distribution(&logits, &cfg);
    assert!((out[0] - 0.625).abs() < 1e-12);
    assert!((out[1] - 0.375).abs() < 1e-12);
    assert_eq!(&out[2..], &[0.0, 0.0]);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let m = noisy_generator(15);
    let prompt = ids("<bos> C0 , L0 <sep>");
    let cfg = DecodeConfig::default();
    let a = sample(&m, &prompt, &cfg, &mut rng(16)).unwrap();
    let b = sample(&m, &prompt, &cfg, &mut rng(16)).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= m.config().max_len);
    assert_eq!(&a.0[..prompt.len()], &prompt[..]);
    let body = continuation(&a.0, prompt.len());
    assert!(!body.contains(&Vocabulary::get().eos()));
}

#[test]
fn sampler_frequencies_follow_filtered_distribution() {
    use circuitsynth::models::sampling::draw;
    let logits: Vec<f64> = (0..10).map(|i| (i as f64) * 0.3).collect();
    let cfg = DecodeConfig {
        top_k: 6,
        top_p: 0.9,
        ..DecodeConfig::default()
    };
    let probs = filtered_distribution(&logits, &cfg);
    let mut counts = [0usize; 10];
    let mut r = rng(17);
    let n = 100_000;
    for _ in 0..n {
        counts[draw(&probs, &mut r)] += 1;
    }
    let tv: f64 = probs
        .iter()
        .zip(counts)
        .map(|(p, c)| (p - c as f64 / n as f64).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.01, "tv {tv}");
}
