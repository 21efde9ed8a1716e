//! Generation metrics: classifier and simulator validity rates, efficiency,
//! duplicate generation rate and the validity t-test, plus the encoding
//! ablation pipeline.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::circuit::Topology;
use crate::dataset::{random_duty, random_pool, stream_rng, DatasetRecord};
use crate::encoding::{encode_topology, parse_topology, prompt_ids, EncodingMode, Vocabulary};
use crate::models::sampling::{continuation, sample};
use crate::models::{
    Classifier, ClassifierConfig, DecodeConfig, Generator, GeneratorConfig, ModelError,
};
use crate::sim::{oracle, SimConfig};
use crate::training::{
    classifier_examples, lm_examples, pretrain_lm, refine, train_classifier, ClassifierReport,
    PretrainReport, RefineConfig, RefineReport, TrainConfig, TrainError,
};

/// Classifier score above which a sample counts as classifier-valid.
pub const VALIDITY_THRESHOLD: f64 = 0.6;

/// Attempt budget per requested unique sample.
pub const ATTEMPTS_PER_UNIQUE: usize = 50;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("t-test groups need at least two values each and some variance")]
    DegenerateGroups,
    #[error("invalid evaluation argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One parsed generation with its evaluation duty cycle.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub topology: Topology,
    pub duty: f64,
    /// Netlist text as generated.
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct UniqueSet {
    pub samples: Vec<GeneratedSample>,
    /// Every decode, including unparseable and duplicate ones.
    pub attempts: usize,
    pub unparseable: usize,
    pub duplicates: usize,
    /// The attempt budget ran out before `n_unique` samples were found.
    pub exhausted: bool,
}

impl UniqueSet {
    /// Duplicate generation rate, attempts per unique sample; infinite when
    /// nothing parsed.
    pub fn rho(&self) -> f64 {
        self.attempts as f64 / self.samples.len() as f64
    }
}

enum Attempt {
    Unparseable,
    Parsed(GeneratedSample),
}

fn attempt(
    model: &Generator,
    decode: &DecodeConfig,
    seed: u64,
    index: usize,
) -> Result<Attempt, ModelError> {
    let mut rng = stream_rng(seed, index as u64);
    let pool = random_pool(&mut rng);
    let duty = random_duty(&mut rng);
    let prompt = prompt_ids(&pool);
    let seq = sample(model, &prompt, decode, &mut rng)?;
    let text = Vocabulary::get().detokenize(continuation(&seq.0, prompt.len()));
    Ok(
        match parse_topology(&text, &pool, model.config().encoding) {
            Ok(topology) => Attempt::Parsed(GeneratedSample {
                topology,
                duty,
                text,
            }),
            Err(_) => Attempt::Unparseable,
        },
    )
}

/// Samples fresh prompts until `n_unique` distinct topologies parse or
/// `max_attempts` decodes have been made. Attempt `i` draws from its own rng
/// stream, so results do not depend on the thread count.
pub fn generate_unique(
    model: &Generator,
    n_unique: usize,
    decode: &DecodeConfig,
    max_attempts: usize,
    seed: u64,
) -> Result<UniqueSet, EvalError> {
    if n_unique == 0 || max_attempts < n_unique {
        return Err(EvalError::InvalidArgument(format!(
            "need 1 <= n_unique ({n_unique}) <= max_attempts ({max_attempts})"
        )));
    }
    decode.validate()?;
    let chunk = rayon::current_num_threads().max(1) * 4;
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(n_unique);
    let mut attempts = 0;
    let (mut unparseable, mut duplicates) = (0, 0);
    while samples.len() < n_unique && attempts < max_attempts {
        let end = (attempts + chunk).min(max_attempts);
        let batch: Vec<Result<Attempt, ModelError>> = (attempts..end)
            .into_par_iter()
            .map(|i| attempt(model, decode, seed, i))
            .collect();
        for a in batch {
            attempts += 1;
            match a? {
                Attempt::Unparseable => unparseable += 1,
                Attempt::Parsed(s) => {
                    if seen.insert(s.topology.canonicalize()) {
                        samples.push(s);
                    } else {
                        duplicates += 1;
                    }
                }
            }
            if samples.len() == n_unique {
                break;
            }
        }
    }
    let exhausted = samples.len() < n_unique;
    Ok(UniqueSet {
        samples,
        attempts,
        unparseable,
        duplicates,
        exhausted,
    })
}

/// Classifier score and simulator verdict of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub p_valid: f64,
    pub sim_valid: bool,
    /// NaN unless simulator-valid.
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub e_fvalid: f64,
    pub e_fsvalid: f64,
    pub e_fseff: f64,
    pub rho: f64,
    pub n_unique: usize,
    pub n_attempts: usize,
    /// Welch statistic of `p_valid` between simulator-valid and -invalid
    /// samples; NaN when either group is degenerate.
    pub t_stat: f64,
    pub p_value: f64,
}

impl EvalReport {
    pub const TSV_HEADER: &'static str =
        "E(f_valid)\tE(f_S_valid)\tE(f_S_eff)\trho\tn_unique\tn_attempts\tt_stat\tp_value";

    pub fn tsv_row(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{:.6e}",
            self.e_fvalid,
            self.e_fsvalid,
            self.e_fseff,
            self.rho,
            self.n_unique,
            self.n_attempts,
            self.t_stat,
            self.p_value
        )
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}\n", Self::TSV_HEADER, self.tsv_row())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<SampleScore>,
}

/// Scores `set` with the classifier and the simulator oracle. Pure in its
/// inputs; per-sample work runs in parallel and aggregates in sample order.
/// An empty set scores zero on every rate.
pub fn eval_metrics(
    set: &UniqueSet,
    clf: &Classifier,
    sim: &SimConfig,
    threshold: f64,
) -> Result<Evaluation, EvalError> {
    let vocab = Vocabulary::get();
    let mode = clf.config().encoding;
    let scores: Vec<SampleScore> = set
        .samples
        .par_iter()
        .map(|s| {
            let ids = vocab
                .ids(&encode_topology(&s.topology, mode))
                .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
            let p_valid = clf.p_valid(&ids)?;
            let (sim_valid, efficiency) = if s.topology.structural_screen().connected {
                let v = oracle(&s.topology, s.duty, sim);
                (
                    v.valid,
                    v.efficiency.filter(|_| v.valid).unwrap_or(f64::NAN),
                )
            } else {
                (false, f64::NAN)
            };
            Ok(SampleScore {
                p_valid,
                sim_valid,
                efficiency,
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let n = scores.len().max(1) as f64;
    let clf_valid = scores.iter().filter(|s| s.p_valid > threshold).count();
    let valid: Vec<&SampleScore> = scores.iter().filter(|s| s.sim_valid).collect();
    let e_fseff = if valid.is_empty() {
        0.0
    } else {
        valid.iter().map(|s| s.efficiency).sum::<f64>() / valid.len() as f64
    };
    let pos: Vec<f64> = scores
        .iter()
        .filter(|s| s.sim_valid)
        .map(|s| s.p_valid)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .filter(|s| !s.sim_valid)
        .map(|s| s.p_valid)
        .collect();
    let (t_stat, p_value) = welch_t_test(&pos, &neg).unwrap_or((f64::NAN, f64::NAN));
    Ok(Evaluation {
        report: EvalReport {
            e_fvalid: clf_valid as f64 / n,
            e_fsvalid: valid.len() as f64 / n,
            e_fseff,
            rho: set.rho(),
            n_unique: scores.len(),
            n_attempts: set.attempts,
            t_stat,
            p_value,
        },
        scores,
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::DegenerateGroups);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(EvalError::DegenerateGroups);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| EvalError::DegenerateGroups)?;
    Ok((t, (2.0 * dist.sf(t.abs())).min(1.0)))
}

/// Histogram of `p_valid` split by simulator label, as TSV with columns
/// `bin_lo bin_hi sim_valid sim_invalid`.
pub fn p_valid_histogram(scores: &[SampleScore], bins: usize) -> String {
    let bins = bins.max(1);
    let mut valid = vec![0usize; bins];
    let mut invalid = vec![0usize; bins];
    for s in scores {
        let b = ((s.p_valid * bins as f64) as usize).min(bins - 1);
        if s.sim_valid {
            valid[b] += 1;
        } else {
            invalid[b] += 1;
        }
    }
    let mut out = String::from("bin_lo\tbin_hi\tsim_valid\tsim_invalid\n");
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let _ = writeln!(out, "{lo:.3}\t{hi:.3}\t{}\t{}", valid[b], invalid[b]);
    }
    out
}

/// Everything one encoding's pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub classifier: ClassifierConfig,
    pub classifier_train: TrainConfig,
    pub generator: GeneratorConfig,
    pub pretrain: TrainConfig,
    pub refine: RefineConfig,
    pub decode: DecodeConfig,
    pub n_unique: usize,
    pub eval_seed: u64,
    pub threshold: f64,
    pub sim: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            classifier_train: TrainConfig {
                lr: 1e-3,
                epochs: 8,
                ..TrainConfig::default()
            },
            generator: GeneratorConfig::default(),
            pretrain: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            refine: RefineConfig {
                steps: 150,
                ..RefineConfig::default()
            },
            decode: DecodeConfig::default(),
            n_unique: 200,
            eval_seed: 7,
            threshold: VALIDITY_THRESHOLD,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub mode: EncodingMode,
    pub classifier: ClassifierReport,
    pub pretrain: PretrainReport,
    pub refine: RefineReport,
    pub baseline: Evaluation,
    pub refined: Evaluation,
}

/// The untrained generator of a pipeline, seeded from the pretraining seed.
pub fn initial_generator(
    mode: EncodingMode,
    cfg: &PipelineConfig,
) -> Result<Generator, ModelError> {
    let mut init_rng = stream_rng(cfg.pretrain.seed, 0x0047_454e);
    Generator::new(
        GeneratorConfig {
            encoding: mode,
            ..cfg.generator.clone()
        },
        &mut init_rng,
    )
}

/// Trains a classifier, pretrains a generator, refines it and evaluates both
/// generators, all under encoding `mode`.
pub fn run_pipeline(
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    mode: EncodingMode,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, EvalError> {
    let (clf, clf_report) = train_classifier(
        ClassifierConfig {
            encoding: mode,
            ..cfg.classifier.clone()
        },
        &classifier_examples(train, mode)?,
        &classifier_examples(val, mode)?,
        &cfg.classifier_train,
    )?;
    let lm_train = lm_examples(train, mode)?;
    let lm_val = lm_examples(val, mode)?;
    let gen = initial_generator(mode, cfg)?;
    let (baseline, pretrain) = pretrain_lm(gen, &lm_train, &lm_val, &cfg.pretrain)?;
    let (refined, refine_report) = refine(baseline.clone(), &clf, &lm_train, &cfg.refine)?;
    let budget = cfg.n_unique * ATTEMPTS_PER_UNIQUE;
    let score = |g: &Generator| -> Result<Evaluation, EvalError> {
        let set = generate_unique(g, cfg.n_unique, &cfg.decode, budget, cfg.eval_seed)?;
        eval_metrics(&set, &clf, &cfg.sim, cfg.threshold)
    };
    Ok(PipelineOutcome {
        mode,
        classifier: clf_report,
        pretrain,
        refine: refine_report,
        baseline: score(&baseline)?,
        refined: score(&refined)?,
    })
}

/// Runs [`run_pipeline`] under both encodings with identical data and seeds.
pub fn ablation_run(
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    cfg: &PipelineConfig,
) -> Result<[PipelineOutcome; 2], EvalError> {
    Ok([
        run_pipeline(train, val, EncodingMode::NlIncident, cfg)?,
        run_pipeline(train, val, EncodingMode::Array, cfg)?,
    ])
}

/// Side-by-side table of the refined reports of an ablation.
pub fn comparison_table(outcomes: &[PipelineOutcome]) -> String {
    let mut out = format!("encoding\tmodel\t{}\n", EvalReport::TSV_HEADER);
    for o in outcomes {
        for (name, e) in [("baseline", &o.baseline), ("refined", &o.refined)] {
            let _ = writeln!(out, "{}\t{name}\t{}", o.mode.name(), e.report.tsv_row());
        }
    }
    out
}
