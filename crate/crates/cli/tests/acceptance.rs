//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs in a single test so the corpus and classifier built for the quality
//! criterion are reused by the refinement and correlation criteria.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use circuitsynth::autodiff::check::run_op_suite;
use circuitsynth::autodiff::Tensor;
use circuitsynth::circuit::{ComponentPool, DeviceKind::*, PortId, SymmetryAction, Topology};
use circuitsynth::dataset::{
    generate_dataset, random_duty, random_pool, random_topology, split, stream_rng,
};
use circuitsynth::encoding::{encode_topology, parse_topology, EncodingMode};
use circuitsynth::evaluation::{
    eval_metrics, generate_unique, initial_generator, welch_t_test, EvalReport, PipelineConfig,
    ATTEMPTS_PER_UNIQUE,
};
use circuitsynth::models::check::{clf_loss_gradcheck, lm_loss_gradcheck, small_classifier_config};
use circuitsynth::models::{Classifier, ClassifierConfig, Generator, GeneratorConfig};
use circuitsynth::sim::{
    oracle, transient, Element, Network, PeriodIntegrator, PeriodMapEngine, SimConfig,
    SteppedEngine,
};
use circuitsynth::training::{
    anchored_st_gradcheck, classifier_examples, evaluate_classifier, gumbel_st_step, lm_examples,
    pretrain_lm, refine, RefineConfig,
};

struct Ledger {
    results: Vec<(u32, bool)>,
}

impl Ledger {
    fn record(&mut self, id: u32, pass: bool, detail: String, elapsed: Duration) {
        let line = format!(
            "criterion {id:>2}: {} ({:.1} s) {detail}\n",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        // Written past the test harness capture so the lines always show.
        let _ = std::io::stderr().write_all(line.as_bytes());
        self.results.push((id, pass));
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn simulator_fidelity() -> (bool, String) {
    let (r, c, v) = (1e3, 1e-6, 10.0);
    let net = Network {
        nodes: 2,
        elements: vec![
            Element::VoltageSource { pos: 1, neg: 0, v },
            Element::Resistor { a: 1, b: 2, r },
            Element::Capacitor { a: 2, b: 0, c },
        ],
        output: 2,
        load: None,
        g_min: 0.0,
    };
    let h = r * c / 100.0;
    let mut worst: f64 = 0.0;
    let mut check = |engine: &mut dyn PeriodIntegrator<f64>| {
        for k in 1..=2 {
            engine.next_period().unwrap();
            let exact = v * (1.0 - (-(k as f64)).exp());
            worst = worst.max((engine.state()[0] - exact).abs() / exact);
        }
    };
    check(&mut SteppedEngine::new(&net, h, 100, 0.5, true).unwrap());
    check(&mut PeriodMapEngine::new(&net, h, 100, 0.5).unwrap());
    let pool = ComponentPool::new([Capacitor, Inductor, PhaseISwitch, PhaseIISwitch, Capacitor]);
    let divider = Topology::from_groups(pool, &[&[PortId::IN, PortId::OUT]]);
    let eta = oracle(&divider, 0.5, &SimConfig::default())
        .efficiency
        .unwrap_or(f64::NAN);
    let pass = worst < 0.01 && (eta - 0.998004).abs() < 1e-3;
    (
        pass,
        format!("RC max rel err {worst:.2e}, divider efficiency {eta:.6}"),
    )
}

fn passivity() -> (bool, String) {
    let cfg = SimConfig::default();
    let (mut simulated, mut violations, mut worst) = (0, 0, f64::NEG_INFINITY);
    let mut i = 0;
    while simulated < 500 {
        let mut rng = stream_rng(2024, i);
        i += 1;
        let pool = random_pool(&mut rng);
        let duty = random_duty(&mut rng);
        let t = random_topology(pool, &mut rng);
        if !t.structural_screen().connected {
            continue;
        }
        let Ok(r) = transient::<f64>(&t, duty, &cfg) else {
            continue;
        };
        simulated += 1;
        worst = worst.max(r.p_out - r.p_in);
        if r.p_out > r.p_in + 1e-9 {
            violations += 1;
        }
    }
    (
        violations == 0,
        format!(
            "{violations} violations over {simulated} circuits, max p_out - p_in {worst:.3e} W"
        ),
    )
}

fn gradcheck_suite() -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for seed in 0..3 {
        for (name, r) in run_op_suite(seed, 1e-6).unwrap() {
            if r.max_rel_error > worst {
                (worst, worst_name) = (r.max_rel_error, name);
            }
        }
    }
    let lm = lm_loss_gradcheck(11, 1e-6).unwrap().max_rel_error;
    let clf = clf_loss_gradcheck(12, 1e-6).unwrap().max_rel_error;
    let pass = worst < 1e-5 && lm < 1e-5 && clf < 1e-5;
    (
        pass,
        format!("ops max {worst:.2e} ({worst_name}), LM loss {lm:.2e}, classifier loss {clf:.2e}"),
    )
}

fn gumbel_exactness() -> (bool, String) {
    let mut rng = stream_rng(77, 0);
    let logits = Tensor::<f64>::randn(1, 80, 1.0, &mut rng).into_data();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let n = 100_000;
    let mut counts = vec![0usize; 80];
    let mut disagreements = 0;
    for _ in 0..n {
        let (hard, soft) = gumbel_st_step(&logits, 1.0, &mut rng);
        let soft_max = (0..80)
            .max_by(|&a, &b| soft[a].total_cmp(&soft[b]))
            .unwrap();
        disagreements += usize::from(soft_max != hard);
        counts[hard] += 1;
    }
    let tv: f64 = logits
        .iter()
        .zip(&counts)
        .map(|(l, &c)| ((l - m).exp() / z - c as f64 / n as f64).abs())
        .sum::<f64>()
        / 2.0;
    (
        tv < 0.02 && disagreements == 0,
        format!("TV {tv:.4}, argmax disagreements {disagreements}"),
    )
}

fn straight_through() -> (bool, String) {
    let worst = (0..3)
        .map(|seed| {
            anchored_st_gradcheck(seed, 1.0, 1e-6)
                .unwrap()
                .max_rel_error
        })
        .fold(0.0, f64::max);
    // Frozen contract: a short refinement leaves the classifier bytes alone.
    let mut rng = stream_rng(5, 0);
    let clf = Classifier::new(
        ClassifierConfig {
            encoding: EncodingMode::Array,
            max_len: 96,
            ..small_classifier_config()
        },
        &mut rng,
    )
    .unwrap();
    let (records, _) = generate_dataset(400, &SimConfig::default(), &Default::default());
    let data = lm_examples(&records, EncodingMode::Array).unwrap();
    let pc = PipelineConfig {
        generator: GeneratorConfig {
            max_len: 96,
            ..circuitsynth::models::check::small_generator_config()
        },
        ..PipelineConfig::default()
    };
    let gen = initial_generator(EncodingMode::Array, &pc).unwrap();
    let before = clf.params().to_bytes();
    let rcfg = RefineConfig {
        steps: 3,
        rollout_batch: 2,
        ..RefineConfig::default()
    };
    refine(gen, &clf, &data, &rcfg).unwrap();
    let frozen = clf.params().to_bytes() == before;
    (
        worst < 1e-4 && frozen,
        format!("ST rel err {worst:.2e}, classifier bytes unchanged: {frozen}"),
    )
}

fn roundtrip_and_canonical() -> (bool, String) {
    let mut rng = stream_rng(6, 0);
    let mut failures = 0;
    for _ in 0..10_000 {
        let pool = random_pool(&mut rng);
        let t = random_topology(pool, &mut rng);
        for mode in [EncodingMode::NlIncident, EncodingMode::Array] {
            if parse_topology(&encode_topology(&t, mode), &pool, mode).ok() != Some(t) {
                failures += 1;
            }
        }
    }
    let mut key_changes = 0;
    for _ in 0..10 {
        let pool = random_pool(&mut rng);
        let t = random_topology(pool, &mut rng);
        let key = t.canonicalize();
        for _ in 0..1000 {
            if t.act(&SymmetryAction::random(&pool, &mut rng))
                .canonicalize()
                != key
            {
                key_changes += 1;
            }
        }
    }
    (
        failures == 0 && key_changes == 0,
        format!("{failures} roundtrip failures over 10000 topologies x 2 modes, {key_changes} key changes over 10 x 1000 actions"),
    )
}

struct Seeded {
    baseline: EvalReport,
    refined: EvalReport,
    welch_refined: (f64, f64),
}

fn refinement_seeds(
    clf: &Classifier,
    train: &[circuitsynth::dataset::DatasetRecord],
    val: &[circuitsynth::dataset::DatasetRecord],
    pc: &PipelineConfig,
) -> Vec<Seeded> {
    let mode = EncodingMode::Array;
    let tr = lm_examples(train, mode).unwrap();
    let va = lm_examples(val, mode).unwrap();
    (1..=5u64)
        .map(|seed| {
            let mut cfg = pc.clone();
            cfg.pretrain.seed = seed;
            cfg.refine.train.seed = seed;
            let (base, _) = pretrain_lm(initial_generator(mode, &cfg).unwrap(), &tr, &va, &cfg.pretrain).unwrap();
            let (refined, _) = refine(base.clone(), clf, &tr, &cfg.refine).unwrap();
            let score = |g: &Generator| {
                let set = generate_unique(g, 200, &cfg.decode, 200 * ATTEMPTS_PER_UNIQUE, seed).unwrap();
                eval_metrics(&set, clf, &cfg.sim, cfg.threshold).unwrap()
            };
            let (b, r) = (score(&base), score(&refined));
            let line = format!(
                "    seed {seed}: baseline E(f_S_valid) {:.3} rho {:.3} | refined E(f_S_valid) {:.3} rho {:.3} p {:.2e}\n",
                b.report.e_fsvalid, b.report.rho, r.report.e_fsvalid, r.report.rho, r.report.p_value
            );
            let _ = std::io::stderr().write_all(line.as_bytes());
            Seeded {
                welch_refined: (r.report.t_stat, r.report.p_value),
                baseline: b.report,
                refined: r.report,
            }
        })
        .collect()
}

fn cli_determinism() -> (bool, String) {
    let bin = env!("CARGO_BIN_EXE_circuitsynth");
    let conf = "\
data.n=1500
clf.d_model=16
clf.n_layers=1
clf.n_heads=2
clf_train.epochs=1
lm.d_model=16
lm.n_layers=1
lm.n_heads=2
lm_train.epochs=1
refine.steps=3
refine.rollout_batch=2
eval.n_unique=10
";
    let steps: [&[&str]; 5] = [
        &["gen-data", "--seed", "7", "--out", "d.csd"],
        &["train-clf", "--data", "d.csd", "--out", "clf.ckpt"],
        &["train-lm", "--data", "d.csd", "--out", "lm.ckpt"],
        &[
            "refine", "--lm", "lm.ckpt", "--clf", "clf.ckpt", "--data", "d.csd", "--out",
            "ref.ckpt",
        ],
        &[
            "eval", "--lm", "ref.ckpt", "--clf", "clf.ckpt", "--seed", "3", "--out", "ev",
        ],
    ];
    let run = |dir: &Path, threads: &str| -> Result<(), String> {
        std::fs::write(dir.join("run.conf"), conf).unwrap();
        for args in steps {
            let out = Command::new(bin)
                .current_dir(dir)
                .args(["--config", "run.conf", "--threads", threads])
                .args(args)
                .output()
                .unwrap();
            if !out.status.success() {
                return Err(format!(
                    "{args:?}: {}",
                    String::from_utf8_lossy(&out.stderr).trim()
                ));
            }
        }
        Ok(())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = run(a.path(), "1").and_then(|_| run(b.path(), "2")) {
        return (false, e);
    }
    let artifacts = [
        "d.csd",
        "clf.ckpt",
        "lm.ckpt",
        "ref.ckpt",
        "ev.report.tsv",
        "ev.samples.tsv",
        "ev.hist.tsv",
        "metrics.log",
    ];
    let differing: Vec<&str> = artifacts
        .into_iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    (
        differing.is_empty(),
        format!(
            "{} artifacts byte-compared across 1 and 2 threads, differing: {differing:?}",
            artifacts.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut ledger = Ledger {
        results: Vec::new(),
    };

    let ((pass, detail), t) = timed(simulator_fidelity);
    ledger.record(1, pass && t < Duration::from_secs(5), detail, t);
    let ((pass, detail), t) = timed(passivity);
    ledger.record(2, pass && t < Duration::from_secs(120), detail, t);
    let ((pass, detail), t) = timed(gradcheck_suite);
    ledger.record(3, pass && t < Duration::from_secs(60), detail, t);
    let ((pass, detail), t) = timed(gumbel_exactness);
    ledger.record(4, pass && t < Duration::from_secs(30), detail, t);
    let ((pass, detail), t) = timed(straight_through);
    ledger.record(5, pass, detail, t);
    let ((pass, detail), t) = timed(roundtrip_and_canonical);
    ledger.record(6, pass && t < Duration::from_secs(60), detail, t);

    let pc = PipelineConfig::default();
    let mode = EncodingMode::Array;
    let ((clf, train, val, records_len, f1, test_len), t) = timed(|| {
        let (records, _) = generate_dataset(20_000, &pc.sim, &Default::default());
        let (train, val, test) = split(&records, &Default::default());
        let (clf, _) = circuitsynth::training::train_classifier(
            ClassifierConfig {
                encoding: mode,
                ..pc.classifier.clone()
            },
            &classifier_examples(&train, mode).unwrap(),
            &classifier_examples(&val, mode).unwrap(),
            &pc.classifier_train,
        )
        .unwrap();
        let f1 = evaluate_classifier(&clf, &classifier_examples(&test, mode).unwrap())
            .unwrap()
            .f1;
        (clf, train, val, records.len(), f1, test.len())
    });
    ledger.record(
        7,
        f1 >= 0.85 && records_len >= 20_000 && t <= Duration::from_secs(900),
        format!("held-out F1 {f1:.4} on {test_len} test records of {records_len}"),
        t,
    );

    let (seeds, t) = timed(|| refinement_seeds(&clf, &train, &val, &pc));
    let valid_wins = seeds
        .iter()
        .filter(|s| s.refined.e_fsvalid >= s.baseline.e_fsvalid)
        .count();
    let rho_wins = seeds
        .iter()
        .filter(|s| s.refined.rho <= s.baseline.rho)
        .count();
    let full = seeds
        .iter()
        .all(|s| s.baseline.n_unique == 200 && s.refined.n_unique == 200);
    ledger.record(
        8,
        valid_wins >= 4 && rho_wins >= 4 && full && t <= Duration::from_secs(3600),
        format!("E(f_S_valid) refined >= baseline in {valid_wins}/5 seeds, rho refined <= baseline in {rho_wins}/5, all sets at 200 unique: {full}"),
        t,
    );

    let ((pass, detail), t) = timed(|| {
        let (t_ref, p_ref) = (16.431676725154986, 3.2370478885941205e-06);
        let (t_stat, p) = welch_t_test(&[0.9, 0.8, 0.85, 0.95], &[0.1, 0.2, 0.15, 0.05]).unwrap();
        let oracle_ok = (t_stat - t_ref).abs() < 1e-6 && (p - p_ref).abs() < 1e-6;
        let (rt, rp) = seeds[0].welch_refined;
        (
            oracle_ok && rp < 0.05,
            format!("refined seed-1 set t {rt:.3} p {rp:.3e}; reference t {t_stat:.6} p {p:.6e}"),
        )
    });
    ledger.record(9, pass, detail, t);

    let ((pass, detail), t) = timed(cli_determinism);
    ledger.record(10, pass, detail, t);

    let failed: Vec<u32> = ledger
        .results
        .iter()
        .filter(|r| !r.1)
        .map(|r| r.0)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
