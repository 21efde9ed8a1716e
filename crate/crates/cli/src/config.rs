//! `key=value` configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a trailing comment. Every key has a default, listed by
//! [`Config::describe`].

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use circuitsynth::dataset::{GenerateOptions, SplitSpec};
use circuitsynth::encoding::EncodingMode;
use circuitsynth::evaluation::{PipelineConfig, ATTEMPTS_PER_UNIQUE};
use circuitsynth::models::{ClassifierConfig, DecodeConfig, GeneratorConfig};
use circuitsynth::sim::{Integrator, SimConfig};
use circuitsynth::training::{LossWeighting, RefineConfig, TauSchedule, TrainConfig};
use thiserror::Error;

/// File looked up in the working directory when no `--config` is given.
pub const DEFAULT_FILE: &str = "circuitsynth.conf";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: unknown key `{key}` in `{text}`")]
    UnknownKey {
        source_name: String,
        line: usize,
        key: String,
        text: String,
    },
    #[error("{source_name}:{line}: bad value for `{key}`: {message}")]
    BadValue {
        source_name: String,
        line: usize,
        key: String,
        message: String,
    },
    #[error("{source_name}:{line}: expected `key=value`, got `{text}`")]
    Syntax {
        source_name: String,
        line: usize,
        text: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Evaluation settings beyond the model configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub n_unique: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Attempt budget per requested unique sample.
    pub attempts_per_unique: usize,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub encoding: EncodingMode,
    pub sim: SimConfig,
    pub data_n: usize,
    pub data: GenerateOptions,
    pub split: SplitSpec,
    pub clf: ClassifierConfig,
    pub clf_train: TrainConfig,
    pub lm: GeneratorConfig,
    pub lm_train: TrainConfig,
    pub refine: RefineConfig,
    pub decode: DecodeConfig,
    pub eval: EvalSettings,
    /// Dataset used by `ablate`; generated from `data.*` when empty.
    pub ablate_data: String,
    pub metrics_log: String,
}

impl Default for Config {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            encoding: EncodingMode::Array,
            sim: p.sim,
            data_n: 20_000,
            data: GenerateOptions::default(),
            split: SplitSpec::default(),
            clf: p.classifier,
            clf_train: p.classifier_train,
            lm: p.generator,
            lm_train: p.pretrain,
            refine: p.refine,
            decode: p.decode,
            eval: EvalSettings {
                n_unique: p.n_unique,
                seed: p.eval_seed,
                threshold: p.threshold,
                attempts_per_unique: ATTEMPTS_PER_UNIQUE,
                histogram_bins: 20,
            },
            ablate_data: String::new(),
            metrics_log: "metrics.log".into(),
        }
    }
}

type Getter = fn(&Config) -> String;
type Setter = fn(&mut Config, &str) -> Result<(), String>;

struct Key {
    name: &'static str,
    doc: &'static str,
    get: Getter,
    set: Setter,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn integrator_name(i: Integrator) -> String {
    match i {
        Integrator::PeriodMap => "period-map".into(),
        Integrator::Stepped { cache: true } => "stepped".into(),
        Integrator::Stepped { cache: false } => "stepped-nocache".into(),
    }
}

fn parse_integrator(v: &str) -> Result<Integrator, String> {
    match v {
        "period-map" => Ok(Integrator::PeriodMap),
        "stepped" => Ok(Integrator::Stepped { cache: true }),
        "stepped-nocache" => Ok(Integrator::Stepped { cache: false }),
        _ => Err(format!(
            "`{v}`: expected period-map, stepped or stepped-nocache"
        )),
    }
}

/// Keys shared by the three [`TrainConfig`] sections.
macro_rules! train_keys {
    ($prefix:literal, $($field:ident).+) => {
        [
            Key { name: concat!($prefix, ".lr"), doc: "learning rate", get: |c| c.$($field).+.lr.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.lr = x) },
            Key { name: concat!($prefix, ".beta1"), doc: "AdamW first-moment decay", get: |c| c.$($field).+.beta1.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.beta1 = x) },
            Key { name: concat!($prefix, ".beta2"), doc: "AdamW second-moment decay", get: |c| c.$($field).+.beta2.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.beta2 = x) },
            Key { name: concat!($prefix, ".eps"), doc: "AdamW epsilon", get: |c| c.$($field).+.eps.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.eps = x) },
            Key { name: concat!($prefix, ".weight_decay"), doc: "decoupled weight decay on matrices", get: |c| c.$($field).+.weight_decay.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.weight_decay = x) },
            Key { name: concat!($prefix, ".batch_size"), doc: "examples per step", get: |c| c.$($field).+.batch_size.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.batch_size = x) },
            Key { name: concat!($prefix, ".epochs"), doc: "passes over the training split", get: |c| c.$($field).+.epochs.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.epochs = x) },
            Key { name: concat!($prefix, ".seed"), doc: "initialization and shuffling seed", get: |c| c.$($field).+.seed.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.seed = x) },
            Key { name: concat!($prefix, ".grad_clip"), doc: "global gradient-norm cap", get: |c| c.$($field).+.grad_clip.to_string(), set: |c, v| parse(v).map(|x| c.$($field).+.grad_clip = x) },
        ]
    };
}

/// Keys shared by the two transformer sections.
macro_rules! model_keys {
    ($prefix:literal, $field:ident) => {
        [
            Key {
                name: concat!($prefix, ".d_model"),
                doc: "embedding width",
                get: |c| c.$field.d_model.to_string(),
                set: |c, v| Ok(c.$field.d_model = parse(v)?),
            },
            Key {
                name: concat!($prefix, ".n_layers"),
                doc: "transformer blocks",
                get: |c| c.$field.n_layers.to_string(),
                set: |c, v| Ok(c.$field.n_layers = parse(v)?),
            },
            Key {
                name: concat!($prefix, ".n_heads"),
                doc: "attention heads",
                get: |c| c.$field.n_heads.to_string(),
                set: |c, v| Ok(c.$field.n_heads = parse(v)?),
            },
            Key {
                name: concat!($prefix, ".ff_mult"),
                doc: "feed-forward width multiplier",
                get: |c| c.$field.ff_mult.to_string(),
                set: |c, v| Ok(c.$field.ff_mult = parse(v)?),
            },
            Key {
                name: concat!($prefix, ".max_len"),
                doc: "maximum sequence length",
                get: |c| c.$field.max_len.to_string(),
                set: |c, v| Ok(c.$field.max_len = parse(v)?),
            },
        ]
    };
}

fn keys() -> Vec<Key> {
    let mut keys = vec![
        Key {
            name: "encoding",
            doc: "netlist encoding of the generator and classifier (nl | array)",
            get: |c| c.encoding.to_string(),
            set: |c, v| parse(v).map(|x| c.encoding = x),
        },
        Key {
            name: "sim.c_dev",
            doc: "device capacitance (F)",
            get: |c| c.sim.c_dev.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.c_dev = x),
        },
        Key {
            name: "sim.l_dev",
            doc: "device inductance (H)",
            get: |c| c.sim.l_dev.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.l_dev = x),
        },
        Key {
            name: "sim.r_in",
            doc: "source resistance (ohm)",
            get: |c| c.sim.r_in.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.r_in = x),
        },
        Key {
            name: "sim.r_load",
            doc: "load resistance (ohm)",
            get: |c| c.sim.r_load.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.r_load = x),
        },
        Key {
            name: "sim.c_out",
            doc: "output capacitance (F)",
            get: |c| c.sim.c_out.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.c_out = x),
        },
        Key {
            name: "sim.v_in",
            doc: "input voltage (V)",
            get: |c| c.sim.v_in.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.v_in = x),
        },
        Key {
            name: "sim.f_sw",
            doc: "switching frequency (Hz)",
            get: |c| c.sim.f_sw.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.f_sw = x),
        },
        Key {
            name: "sim.r_on",
            doc: "closed switch resistance (ohm)",
            get: |c| c.sim.r_on.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.r_on = x),
        },
        Key {
            name: "sim.r_off",
            doc: "open switch resistance (ohm)",
            get: |c| c.sim.r_off.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.r_off = x),
        },
        Key {
            name: "sim.g_min",
            doc: "shunt conductance per node (S)",
            get: |c| c.sim.g_min.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.g_min = x),
        },
        Key {
            name: "sim.steps_per_period",
            doc: "backward-Euler steps per switching period",
            get: |c| c.sim.steps_per_period.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.steps_per_period = x),
        },
        Key {
            name: "sim.max_periods",
            doc: "period cap of the stepped integrator",
            get: |c| c.sim.max_periods.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.max_periods = x),
        },
        Key {
            name: "sim.min_periods",
            doc: "periods before the stepped integrator may stop",
            get: |c| c.sim.min_periods.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.min_periods = x),
        },
        Key {
            name: "sim.ss_tol",
            doc: "relative settle tolerance of the stepped integrator",
            get: |c| c.sim.ss_tol.to_string(),
            set: |c, v| parse(v).map(|x| c.sim.ss_tol = x),
        },
        Key {
            name: "sim.integrator",
            doc: "period-map | stepped | stepped-nocache",
            get: |c| integrator_name(c.sim.integrator),
            set: |c, v| parse_integrator(v).map(|x| c.sim.integrator = x),
        },
        Key {
            name: "data.n",
            doc: "records generated by gen-data",
            get: |c| c.data_n.to_string(),
            set: |c, v| parse(v).map(|x| c.data_n = x),
        },
        Key {
            name: "data.seed",
            doc: "random-search seed",
            get: |c| c.data.seed.to_string(),
            set: |c, v| parse(v).map(|x| c.data.seed = x),
        },
        Key {
            name: "data.dedup",
            doc: "drop repeated (topology, duty) pairs",
            get: |c| c.data.dedup.to_string(),
            set: |c, v| parse(v).map(|x| c.data.dedup = x),
        },
        Key {
            name: "data.screen",
            doc: "skip simulation of screen-disconnected topologies",
            get: |c| c.data.screen.to_string(),
            set: |c, v| parse(v).map(|x| c.data.screen = x),
        },
        Key {
            name: "split.train",
            doc: "training fraction",
            get: |c| c.split.train.to_string(),
            set: |c, v| parse(v).map(|x| c.split.train = x),
        },
        Key {
            name: "split.val",
            doc: "validation fraction",
            get: |c| c.split.val.to_string(),
            set: |c, v| parse(v).map(|x| c.split.val = x),
        },
        Key {
            name: "split.test",
            doc: "test fraction",
            get: |c| c.split.test.to_string(),
            set: |c, v| parse(v).map(|x| c.split.test = x),
        },
        Key {
            name: "split.seed",
            doc: "split hashing seed",
            get: |c| c.split.seed.to_string(),
            set: |c, v| parse(v).map(|x| c.split.seed = x),
        },
    ];
    keys.extend(model_keys!("clf", clf));
    keys.extend(train_keys!("clf_train", clf_train));
    keys.extend(model_keys!("lm", lm));
    keys.extend(train_keys!("lm_train", lm_train));
    keys.extend(train_keys!("refine", refine.train));
    keys.extend([
        Key {
            name: "refine.steps",
            doc: "refinement optimizer steps",
            get: |c| c.refine.steps.to_string(),
            set: |c, v| parse(v).map(|x| c.refine.steps = x),
        },
        Key {
            name: "refine.rollout_batch",
            doc: "rollouts per step for the validity loss",
            get: |c| c.refine.rollout_batch.to_string(),
            set: |c, v| parse(v).map(|x| c.refine.rollout_batch = x),
        },
        Key {
            name: "refine.max_len",
            doc: "rollout length cap, prompt included",
            get: |c| c.refine.max_len.to_string(),
            set: |c, v| parse(v).map(|x| c.refine.max_len = x),
        },
        Key {
            name: "refine.weighting",
            doc: "learnable:S1,S2 (lambda = exp(-s)) or fixed:L1,L2",
            get: |c| match c.refine.weighting {
                LossWeighting::Learnable { s1, s2 } => format!("learnable:{s1},{s2}"),
                LossWeighting::Fixed { lambda1, lambda2 } => format!("fixed:{lambda1},{lambda2}"),
            },
            set: |c, v| {
                let (kind, rest) = v
                    .split_once(':')
                    .ok_or_else(|| format!("`{v}`: expected kind:a,b"))?;
                let (a, b) = rest
                    .split_once(',')
                    .ok_or_else(|| format!("`{v}`: expected two comma-separated numbers"))?;
                let (a, b): (f64, f64) = (parse(a.trim())?, parse(b.trim())?);
                c.refine.weighting = match kind {
                    "learnable" => LossWeighting::Learnable { s1: a, s2: b },
                    "fixed" => LossWeighting::Fixed {
                        lambda1: a,
                        lambda2: b,
                    },
                    _ => return Err(format!("`{kind}`: expected learnable or fixed")),
                };
                Ok(())
            },
        },
        Key {
            name: "refine.tau",
            doc: "Gumbel-softmax temperature: fixed:T or anneal:T0,TMIN",
            get: |c| match c.refine.train.tau {
                TauSchedule::Fixed(t) => format!("fixed:{t}"),
                TauSchedule::ExpAnneal { tau0, tau_min } => format!("anneal:{tau0},{tau_min}"),
            },
            set: |c, v| {
                c.refine.train.tau = match v.split_once(':') {
                    Some(("fixed", t)) => TauSchedule::Fixed(parse(t)?),
                    Some(("anneal", rest)) => {
                        let (a, b) = rest
                            .split_once(',')
                            .ok_or_else(|| format!("`{v}`: expected anneal:T0,TMIN"))?;
                        TauSchedule::ExpAnneal {
                            tau0: parse(a)?,
                            tau_min: parse(b)?,
                        }
                    }
                    _ => return Err(format!("`{v}`: expected fixed:T or anneal:T0,TMIN")),
                };
                Ok(())
            },
        },
        Key {
            name: "decode.temperature",
            doc: "sampling temperature",
            get: |c| c.decode.temperature.to_string(),
            set: |c, v| parse(v).map(|x| c.decode.temperature = x),
        },
        Key {
            name: "decode.top_k",
            doc: "top-k truncation",
            get: |c| c.decode.top_k.to_string(),
            set: |c, v| parse(v).map(|x| c.decode.top_k = x),
        },
        Key {
            name: "decode.top_p",
            doc: "nucleus truncation",
            get: |c| c.decode.top_p.to_string(),
            set: |c, v| parse(v).map(|x| c.decode.top_p = x),
        },
        Key {
            name: "decode.max_len",
            doc: "sequence cap, prompt included",
            get: |c| c.decode.max_len.to_string(),
            set: |c, v| parse(v).map(|x| c.decode.max_len = x),
        },
        Key {
            name: "eval.n_unique",
            doc: "unique topologies per evaluation",
            get: |c| c.eval.n_unique.to_string(),
            set: |c, v| parse(v).map(|x| c.eval.n_unique = x),
        },
        Key {
            name: "eval.seed",
            doc: "generation seed",
            get: |c| c.eval.seed.to_string(),
            set: |c, v| parse(v).map(|x| c.eval.seed = x),
        },
        Key {
            name: "eval.threshold",
            doc: "classifier validity threshold",
            get: |c| c.eval.threshold.to_string(),
            set: |c, v| parse(v).map(|x| c.eval.threshold = x),
        },
        Key {
            name: "eval.attempts_per_unique",
            doc: "decode budget per requested unique sample",
            get: |c| c.eval.attempts_per_unique.to_string(),
            set: |c, v| parse(v).map(|x| c.eval.attempts_per_unique = x),
        },
        Key {
            name: "eval.histogram_bins",
            doc: "bins of the p_valid histogram",
            get: |c| c.eval.histogram_bins.to_string(),
            set: |c, v| parse(v).map(|x| c.eval.histogram_bins = x),
        },
        Key {
            name: "ablate.data",
            doc: "dataset for ablate (empty: generate from data.*)",
            get: |c| c.ablate_data.clone(),
            set: |c, v| {
                c.ablate_data = v.to_string();
                Ok(())
            },
        },
        Key {
            name: "log.metrics",
            doc: "metrics log appended by the training commands",
            get: |c| c.metrics_log.clone(),
            set: |c, v| {
                c.metrics_log = v.to_string();
                Ok(())
            },
        },
    ]);
    keys
}

impl Config {
    /// Parses `text` on top of the defaults.
    pub fn parse(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply(text, source_name)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` lines in order.
    pub fn apply(&mut self, text: &str, source_name: &str) -> Result<(), ConfigError> {
        let keys = keys();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    source_name: source_name.into(),
                    line,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            let entry =
                keys.iter()
                    .find(|k| k.name == key)
                    .ok_or_else(|| ConfigError::UnknownKey {
                        source_name: source_name.into(),
                        line,
                        key: key.to_string(),
                        text: raw.to_string(),
                    })?;
            (entry.set)(self, value.trim()).map_err(|message| ConfigError::BadValue {
                source_name: source_name.into(),
                line,
                key: key.to_string(),
                message,
            })?;
        }
        Ok(())
    }

    /// Sets one key, as from a command-line override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.apply(&format!("{key}={value}"), "--set")
    }

    pub fn get(&self, key: &str) -> Option<String> {
        keys().iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Every key with its current value and description, as a config file.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for k in keys() {
            let _ = writeln!(out, "# {}\n{}={}", k.doc, k.name, (k.get)(self));
        }
        out
    }
}
