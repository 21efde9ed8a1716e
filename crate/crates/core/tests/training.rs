use circuitsynth::autodiff::{Graph, Tensor};
use circuitsynth::dataset::{generate_dataset, GenerateOptions};
use circuitsynth::encoding::{EncodingMode, TokenId, Vocabulary};
use circuitsynth::models::check::{small_classifier_config, small_generator_config};
use circuitsynth::models::{Classifier, ClassifierConfig, Generator, GeneratorConfig};
use circuitsynth::sim::SimConfig;
use circuitsynth::training::{
    adamw_step, anchored_st_gradcheck, clip_global_norm, gumbel_st_step, lm_examples, pretrain_lm,
    refine, rollout, train_classifier, AdamState, ClfExample, LmExample, LossWeighting,
    RefineConfig, TauSchedule, TrainConfig, TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar(x: f64) -> Vec<Tensor<f64>> {
    vec![Tensor::scalar(x)]
}

#[test]
fn adamw_matches_hand_computed_steps() {
    // f(x) = x², x0 = 1, lr 0.1, betas (0.9, 0.95); values computed by hand.
    let cfg = TrainConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut x = scalar(1.0);
    let mut state = AdamState::new(&x);
    for expect in [0.9000000005, 0.8002805506951677] {
        let g = scalar(2.0 * x[0].item());
        adamw_step(&mut x, &g, &mut state, &cfg, &[false]);
        assert!(
            (x[0].item() - expect).abs() < 1e-15,
            "{} vs {expect}",
            x[0].item()
        );
    }
}

#[test]
fn adamw_zero_gradient_and_pure_decay() {
    let cfg = TrainConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut x = vec![Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap()];
    let before = x.clone();
    let zero = vec![Tensor::zeros(2, 2)];
    let mut state = AdamState::new(&x);
    adamw_step(&mut x, &zero, &mut state, &cfg, &[true]);
    assert_eq!(x, before);

    let cfg = TrainConfig {
        weight_decay: 0.1,
        ..cfg
    };
    adamw_step(&mut x, &zero, &mut state, &cfg, &[true]);
    for (a, b) in x[0].data().iter().zip(before[0].data()) {
        assert_eq!(*a, b * (1.0 - 0.01 * 0.1));
    }
}

#[test]
fn global_clip_rescales_jointly() {
    let mut g = vec![
        Tensor::from_vec(1, 2, vec![3.0, 0.0]).unwrap(),
        Tensor::scalar(4.0),
    ];
    let norm = clip_global_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
}

#[test]
fn tau_anneal_hits_both_ends() {
    let s = TauSchedule::ExpAnneal {
        tau0: 1.0,
        tau_min: 0.3,
    };
    assert_eq!(s.at(0, 11), 1.0);
    assert!((s.at(10, 11) - 0.3).abs() < 1e-12);
    assert!(s.at(5, 11) < 1.0 && s.at(5, 11) > 0.3);
}

fn toy_set(n: usize, seed: u64) -> Vec<ClfExample> {
    let v = Vocabulary::get();
    let pos: Vec<TokenId> = ["C0", "n1", "n2", ";"]
        .iter()
        .map(|t| v.id(t).unwrap())
        .collect();
    let neg: Vec<TokenId> = ["L0", "n3", "n4", "."]
        .iter()
        .map(|t| v.id(t).unwrap())
        .collect();
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let alphabet = if label { &pos } else { &neg };
            let len = r.gen_range(3..9);
            ClfExample {
                ids: (0..len)
                    .map(|_| alphabet[r.gen_range(0..alphabet.len())])
                    .collect(),
                label,
            }
        })
        .collect()
}

#[test]
fn classifier_separates_disjoint_vocabularies() {
    let cfg = TrainConfig {
        lr: 3e-3,
        epochs: 20,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (_, report) = train_classifier(
        small_classifier_config(),
        &toy_set(64, 1),
        &toy_set(32, 2),
        &cfg,
    )
    .unwrap();
    assert_eq!(report.best.f1, 1.0);
    // Zero-initialised output layer and a balanced first batch.
    assert!((report.first_batch_loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn classifier_rejects_single_class_data() {
    let only_pos: Vec<ClfExample> = toy_set(10, 3).into_iter().filter(|e| e.label).collect();
    let r = train_classifier(
        small_classifier_config(),
        &only_pos,
        &[],
        &TrainConfig::default(),
    );
    assert!(matches!(r, Err(TrainError::DegenerateLabels)));
}

fn corpus_sequences(n: usize, mode: EncodingMode) -> Vec<LmExample> {
    let (records, _) = generate_dataset(n, &SimConfig::default(), &GenerateOptions::default());
    lm_examples(&records, mode).unwrap()
}

/// Valid sequences with pairwise distinct prompts, so each target is
/// determined by its prompt.
fn distinct_prompts(n: usize) -> Vec<LmExample> {
    let mut seen = std::collections::HashSet::new();
    corpus_sequences(2000, EncodingMode::Array)
        .into_iter()
        .filter(|e| seen.insert(e.seq[..e.prompt_len].to_vec()))
        .take(n)
        .collect()
}

#[test]
fn pretraining_memorizes_small_corpus() {
    let data = distinct_prompts(50);
    assert_eq!(data.len(), 50);
    let gen = Generator::new(
        GeneratorConfig {
            encoding: EncodingMode::Array,
            max_len: 48,
            ..GeneratorConfig::default()
        },
        &mut rng(5),
    )
    .unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        epochs: 100,
        batch_size: 10,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let (_, report) = pretrain_lm(gen, &data, &[], &cfg).unwrap();
    assert!(
        report.best_val_nll < 0.05,
        "train NLL {}",
        report.best_val_nll
    );
    assert!(report.initial_val_nll > report.best_val_nll);
}

fn tiny_lm_setup() -> (Generator, Vec<LmExample>, TrainConfig) {
    let data = distinct_prompts(24);
    let gen = Generator::new(
        GeneratorConfig {
            encoding: EncodingMode::Array,
            max_len: 48,
            ..small_generator_config()
        },
        &mut rng(6),
    )
    .unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    (gen, data, cfg)
}

#[test]
fn pretraining_is_bit_reproducible() {
    let (gen, data, cfg) = tiny_lm_setup();
    let (a, ra) = pretrain_lm(gen.clone(), &data, &data[..4], &cfg).unwrap();
    let (b, rb) = pretrain_lm(gen, &data, &data[..4], &cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra.step_losses), bits(&rb.step_losses));
    assert_eq!(a.params().to_bytes(), b.params().to_bytes());
}

fn array_classifier(seed: u64) -> Classifier {
    let mut c = Classifier::new(
        ClassifierConfig {
            encoding: EncodingMode::Array,
            max_len: 48,
            ..small_classifier_config()
        },
        &mut rng(seed),
    )
    .unwrap();
    let mut r = rng(seed + 100);
    for t in c.params_mut().tensors_mut() {
        t.axpy(1.0, &Tensor::randn(t.rows(), t.cols(), 0.3, &mut r));
    }
    c
}

#[test]
fn zero_validity_weight_reproduces_pretraining() {
    let (gen, data, cfg) = tiny_lm_setup();
    let clf = array_classifier(7);
    let (_, pre) = pretrain_lm(gen.clone(), &data, &[], &cfg).unwrap();
    let rcfg = RefineConfig {
        train: cfg.clone(),
        steps: pre.step_losses.len(),
        rollout_batch: 2,
        max_len: 48,
        weighting: LossWeighting::Fixed {
            lambda1: 1.0,
            lambda2: 0.0,
        },
    };
    let (_, rep) = refine(gen, &clf, &data, &rcfg).unwrap();
    let refine_losses: Vec<u64> = rep.steps.iter().map(|s| s.l_llm.to_bits()).collect();
    let pre_losses: Vec<u64> = pre.step_losses.iter().map(|x| x.to_bits()).collect();
    assert_eq!(refine_losses, pre_losses);
}

#[test]
fn refinement_keeps_classifier_frozen_and_is_deterministic() {
    let (gen, data, cfg) = tiny_lm_setup();
    let clf = array_classifier(8);
    let before = clf.params().to_bytes();
    let rcfg = RefineConfig {
        train: cfg,
        steps: 4,
        rollout_batch: 3,
        max_len: 48,
        weighting: LossWeighting::Learnable { s1: 0.0, s2: 0.0 },
    };
    let (a, ra) = refine(gen.clone(), &clf, &data, &rcfg).unwrap();
    let (b, rb) = refine(gen, &clf, &data, &rcfg).unwrap();
    assert_eq!(clf.params().to_bytes(), before);
    assert_eq!(a.params().to_bytes(), b.params().to_bytes());
    assert_eq!(ra, rb);
    for s in &ra.steps {
        assert!(s.lambda1 > 0.0 && s.lambda2 > 0.0);
    }
}

#[test]
fn refinement_rejects_mismatched_encodings() {
    let (gen, data, _) = tiny_lm_setup();
    let clf = Classifier::new(small_classifier_config(), &mut rng(9)).unwrap();
    let nl_gen = Generator::new(small_generator_config(), &mut rng(9)).unwrap();
    assert_eq!(gen.config().encoding, clf.config().encoding);
    assert!(matches!(
        refine(nl_gen, &clf, &data, &RefineConfig::default()),
        Err(TrainError::InvalidConfig(_))
    ));
}

#[test]
fn validity_gradient_reaches_generator() {
    let (gen, _, _) = tiny_lm_setup();
    let clf = array_classifier(10);
    let prompt =
        circuitsynth::encoding::prompt_ids(&circuitsynth::dataset::random_pool(&mut rng(11)));
    let mut r = rng(12);
    for _ in 0..20 {
        let mut g = Graph::new();
        let w = gen.params().bind(&mut g);
        let cw = clf.params().bind_frozen(&mut g);
        let out = rollout(&mut g, &gen, &w, &clf, &cw, &prompt, 1.0, 48, &mut r).unwrap();
        let Some(p) = out.p_valid else { continue };
        g.backward(p).unwrap();
        let norm: f64 = gen
            .params()
            .grads(&g, &w)
            .iter()
            .map(Tensor::squared_norm)
            .sum();
        assert!(norm > 0.0);
        return;
    }
    panic!("every rollout was empty");
}

#[test]
fn straight_through_matches_anchored_relaxation() {
    for seed in 0..3 {
        let report = anchored_st_gradcheck(seed, 1.0, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

fn random_logits(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    Tensor::<f64>::randn(1, n, 1.0, r).into_data()
}

#[test]
fn gumbel_max_samples_the_softmax() {
    let mut r = rng(13);
    let logits = random_logits(&mut r, 80);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    let n = 100_000;
    let mut counts = vec![0usize; 80];
    for _ in 0..n {
        let (hard, soft) = gumbel_st_step(&logits, 0.7, &mut r);
        let soft_max = (0..80)
            .max_by(|&a, &b| soft[a].total_cmp(&soft[b]))
            .unwrap();
        assert_eq!(soft_max, hard);
        counts[hard] += 1;
    }
    let tv: f64 = probs
        .iter()
        .zip(&counts)
        .map(|(p, &c)| (p - c as f64 / n as f64).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "tv {tv}");
}

#[test]
fn low_temperature_relaxation_saturates() {
    // max(ỹ) > 0.99 is guaranteed once the top two noisy logits differ by
    // more than τ ln(99 (K − 1)); closer pairs share the mass.
    let mut r = rng(14);
    let tau = 0.05;
    let bound = tau * (99.0_f64 * 79.0).ln();
    let (mut saturated, mut total_max) = (0, 0.0);
    let draws = 5_000;
    for _ in 0..draws {
        let logits = random_logits(&mut r, 80);
        let mut noise_rng = r.clone();
        let (_, soft) = gumbel_st_step(&logits, tau, &mut r);
        let noisy: Vec<f64> = logits
            .iter()
            .zip(circuitsynth::training::gumbel_noise(80, &mut noise_rng))
            .map(|(l, z)| l + z)
            .collect();
        let mut sorted = noisy.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let max = soft.iter().copied().fold(0.0, f64::max);
        if sorted[0] - sorted[1] > bound {
            assert!(max > 0.99);
        }
        saturated += usize::from(max > 0.99);
        total_max += max;
    }
    assert!(total_max / draws as f64 > 0.95);
    assert!(saturated as f64 / draws as f64 > 0.7);
}
