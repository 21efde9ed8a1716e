use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use circuitsynth::circuit::{CircuitError, ComponentPool};
use circuitsynth::dataset::{
    generate_dataset, read_records, split, write_records, DatasetError, DatasetRecord,
};
use circuitsynth::encoding::{parse_topology, EncodingError, EncodingMode, ParseError};
use circuitsynth::evaluation::{
    ablation_run, comparison_table, eval_metrics, generate_unique, p_valid_histogram, EvalError,
    PipelineConfig,
};
use circuitsynth::models::checkpoint::{self, CheckpointError};
use circuitsynth::models::{Classifier, Generator, ModelError};
use circuitsynth::sim::{judge, transient, SimError, SimStatus};
use circuitsynth::training::{
    classifier_examples, evaluate_classifier, lm_examples, pretrain_lm, refine, train_classifier,
    RefineStep, TrainError,
};
use circuitsynth_cli::{Config, ConfigError, DEFAULT_FILE};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "circuitsynth",
    version,
    about = "Power-converter topology synthesis workbench"
)]
struct Cli {
    /// Configuration file (default: ./circuitsynth.conf when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lm_train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an oracle-labeled dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dedup: bool,
    },
    /// Simulate one netlist and print the result as key=value lines.
    Simulate {
        #[arg(long, conflicts_with = "inline", required_unless_present = "inline")]
        netlist: Option<PathBuf>,
        #[arg(long)]
        inline: Option<String>,
        /// Device list such as `C,C,L,Sa,Sb`.
        #[arg(long)]
        pool: String,
        #[arg(long)]
        duty: f64,
        #[arg(long)]
        encoding: Option<EncodingMode>,
    },
    /// Train the validity classifier.
    TrainClf(TrainArgs),
    /// Pretrain the generator on valid netlists.
    TrainLm(TrainArgs),
    /// Refine a generator against a frozen classifier.
    Refine {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        clf: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print unique generated netlists.
    Sample {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        encoding: Option<EncodingMode>,
    },
    /// Score a generator: report, per-sample scores and p_valid histogram.
    Eval {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        clf: PathBuf,
        #[arg(long = "n-unique")]
        n_unique: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output prefix; writes PREFIX.report.tsv, PREFIX.samples.tsv and PREFIX.hist.tsv.
        #[arg(long, default_value = "eval")]
        out: String,
    },
    /// Run the full pipeline under both encodings and compare.
    Ablate {
        #[arg(long, default_value = "ablation.tsv")]
        out: PathBuf,
    },
    /// Print every configuration key with its value and description.
    ShowConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Misuse detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(code) = classify(cause) {
            return code;
        }
    }
    2
}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<u8> {
    if e.is::<Usage>() {
        return Some(1);
    }
    if let Some(c) = e.downcast_ref::<ConfigError>() {
        return Some(if matches!(c, ConfigError::Io { .. }) {
            2
        } else {
            1
        });
    }
    if let Some(s) = e.downcast_ref::<SimError>() {
        return Some(sim_code(s));
    }
    if let Some(t) = e.downcast_ref::<TrainError>() {
        return Some(train_code(t));
    }
    if let Some(m) = e.downcast_ref::<ModelError>() {
        return Some(model_code(m));
    }
    if let Some(v) = e.downcast_ref::<EvalError>() {
        return Some(match v {
            EvalError::DegenerateGroups => 3,
            EvalError::InvalidArgument(_) => 1,
            EvalError::Model(m) => model_code(m),
            EvalError::Train(t) => train_code(t),
        });
    }
    if e.is::<DatasetError>()
        || e.is::<CheckpointError>()
        || e.is::<ParseError>()
        || e.is::<EncodingError>()
        || e.is::<CircuitError>()
        || e.is::<std::io::Error>()
    {
        return Some(2);
    }
    None
}

fn sim_code(e: &SimError) -> u8 {
    match e {
        SimError::SingularSystem | SimError::NonFinite => 3,
        SimError::BadNetwork(_) => 2,
        SimError::BadConfig(_) => 1,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::NonFinite { .. } | TrainError::Autodiff(_) => 3,
        TrainError::DegenerateLabels | TrainError::EmptyData => 2,
        TrainError::InvalidConfig(_) => 1,
        TrainError::Model(m) => model_code(m),
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::InvalidConfig(_) | ModelError::InvalidDecode(_) => 1,
        ModelError::NonStochasticRows { .. } | ModelError::Autodiff(_) => 3,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None if Path::new(DEFAULT_FILE).exists() => Config::load(Path::new(DEFAULT_FILE))?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = load_config(&cli)?;
    let force = cli.force;
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            dedup,
        } => {
            if let Some(n) = n {
                cfg.data_n = n;
            }
            if let Some(seed) = seed {
                cfg.data.seed = seed;
            }
            cfg.data.dedup |= dedup;
            gen_data(&cfg, &out, force)
        }
        Command::Simulate {
            netlist,
            inline,
            pool,
            duty,
            encoding,
        } => {
            let text = match (netlist, inline) {
                (Some(path), _) => fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?,
                (None, Some(text)) => text,
                (None, None) => bail!(Usage("give --netlist or --inline".into())),
            };
            simulate(
                &cfg,
                text.trim(),
                &pool,
                duty,
                encoding.unwrap_or(cfg.encoding),
            )
        }
        Command::TrainClf(a) => train_clf(&cfg, &a.data, &a.out, force),
        Command::TrainLm(a) => train_lm(&cfg, &a.data, &a.out, force),
        Command::Refine { lm, clf, data, out } => refine_cmd(&cfg, &lm, &clf, &data, &out, force),
        Command::Sample {
            lm,
            n,
            seed,
            encoding,
        } => sample(&cfg, &lm, n, seed, encoding),
        Command::Eval {
            lm,
            clf,
            n_unique,
            seed,
            out,
        } => {
            if let Some(n) = n_unique {
                cfg.eval.n_unique = n;
            }
            if let Some(seed) = seed {
                cfg.eval.seed = seed;
            }
            eval(&cfg, &lm, &clf, &out, force)
        }
        Command::Ablate { out } => ablate(&cfg, &out, force),
        Command::ShowConfig => {
            print!("{}", cfg.describe());
            Ok(())
        }
    }
}

fn ensure_writable(paths: &[&Path], force: bool) -> Result<()> {
    for p in paths {
        if p.exists() && !force {
            bail!(Usage(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn append_log(cfg: &Config, lines: &str) -> Result<()> {
    let path = Path::new(&cfg.metrics_log);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening metrics log {}", path.display()))?;
    f.write_all(lines.as_bytes())
        .with_context(|| format!("writing metrics log {}", path.display()))?;
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    read_records(path).with_context(|| format!("reading {}", path.display()))
}

fn load_generator(path: &Path) -> Result<Generator> {
    let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Generator::from_checkpoint(&ckpt)
        .with_context(|| format!("loading generator {}", path.display()))
}

fn load_classifier(path: &Path) -> Result<Classifier> {
    let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Classifier::from_checkpoint(&ckpt)
        .with_context(|| format!("loading classifier {}", path.display()))
}

fn same_encoding(lm: &Generator, clf: &Classifier) -> Result<()> {
    let (a, b) = (lm.config().encoding, clf.config().encoding);
    if a != b {
        bail!(Usage(format!(
            "generator uses {a} encoding but classifier uses {b}"
        )));
    }
    Ok(())
}

fn gen_data(cfg: &Config, out: &Path, force: bool) -> Result<()> {
    ensure_writable(&[out], force)?;
    let (records, stats) = generate_dataset(cfg.data_n, &cfg.sim, &cfg.data);
    write_records(out, &records).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "wrote {} records to {} ({} attempts, {} duplicates, {} screened out, {} valid)",
        records.len(),
        out.display(),
        stats.attempts,
        stats.duplicates,
        stats.screened_out,
        stats.valid
    );
    Ok(())
}

fn simulate(cfg: &Config, text: &str, pool: &str, duty: f64, mode: EncodingMode) -> Result<()> {
    let pool: ComponentPool = pool.parse().context("parsing --pool")?;
    let topology = parse_topology(text, &pool, mode).context("parsing netlist")?;
    let r = transient::<f64>(&topology, duty, &cfg.sim)?;
    let verdict = judge(&r);
    let status = match r.status {
        SimStatus::Valid => "converged".to_string(),
        SimStatus::Invalid(why) => why.to_string(),
    };
    println!("status={status}");
    println!("valid={}", verdict.valid);
    if let Some(reason) = &verdict.reason {
        println!("reason={reason}");
    }
    println!("v_out_avg={}", r.v_out_avg);
    println!("p_in={}", r.p_in);
    println!("p_out={}", r.p_out);
    match r.efficiency {
        Some(eta) => println!("efficiency={eta}"),
        None => println!("efficiency=nan"),
    }
    println!("periods_run={}", r.periods_run);
    Ok(())
}

fn train_clf(cfg: &Config, data: &Path, out: &Path, force: bool) -> Result<()> {
    ensure_writable(&[out], force)?;
    let records = load_records(data)?;
    let (train, val, test) = split(&records, &cfg.split);
    let mode = cfg.encoding;
    let model_cfg = circuitsynth::models::ClassifierConfig {
        encoding: mode,
        ..cfg.clf.clone()
    };
    let (clf, report) = train_classifier(
        model_cfg,
        &classifier_examples(&train, mode)?,
        &classifier_examples(&val, mode)?,
        &cfg.clf_train,
    )?;
    eprintln!("classifier parameters: {}", clf.param_count());
    let test_metrics = evaluate_classifier(&clf, &classifier_examples(&test, mode)?)?;
    checkpoint::save(out, &clf.to_checkpoint())
        .with_context(|| format!("writing {}", out.display()))?;
    let mut log = format!(
        "# train-clf {} -> {}\nepoch\ttrain_loss\tval_loss\tval_f1\n",
        data.display(),
        out.display()
    );
    for e in &report.history {
        log += &format!(
            "{}\t{:.10}\t{:.10}\t{:.10}\n",
            e.epoch, e.train_loss, e.val.loss, e.val.f1
        );
    }
    log += &format!(
        "best_epoch\t{}\ttest_f1\t{:.10}\ttest_precision\t{:.10}\ttest_recall\t{:.10}\n",
        report.best_epoch, test_metrics.f1, test_metrics.precision, test_metrics.recall
    );
    append_log(cfg, &log)?;
    eprintln!(
        "best epoch {}: val F1 {:.4}, test F1 {:.4} ({} test records)",
        report.best_epoch,
        report.best.f1,
        test_metrics.f1,
        test.len()
    );
    Ok(())
}

fn train_lm(cfg: &Config, data: &Path, out: &Path, force: bool) -> Result<()> {
    ensure_writable(&[out], force)?;
    let records = load_records(data)?;
    let (train, val, _) = split(&records, &cfg.split);
    let mode = cfg.encoding;
    let pipeline = pipeline_config(cfg);
    let generator = circuitsynth::evaluation::initial_generator(mode, &pipeline)?;
    eprintln!("generator parameters: {}", generator.param_count());
    let (lm, report) = pretrain_lm(
        generator,
        &lm_examples(&train, mode)?,
        &lm_examples(&val, mode)?,
        &cfg.lm_train,
    )?;
    checkpoint::save(out, &lm.to_checkpoint())
        .with_context(|| format!("writing {}", out.display()))?;
    let mut log = format!(
        "# train-lm {} -> {}\nepoch\ttrain_loss\tval_nll\ninit\t-\t{:.10}\n",
        data.display(),
        out.display(),
        report.initial_val_nll
    );
    for e in &report.history {
        log += &format!("{}\t{:.10}\t{:.10}\n", e.epoch, e.train_loss, e.val_nll);
    }
    append_log(cfg, &log)?;
    eprintln!(
        "validation NLL {:.4} -> {:.4} (kept epoch {:?})",
        report.initial_val_nll, report.best_val_nll, report.best_epoch
    );
    Ok(())
}

fn refine_cmd(
    cfg: &Config,
    lm: &Path,
    clf: &Path,
    data: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    ensure_writable(&[out], force)?;
    let generator = load_generator(lm)?;
    let classifier = load_classifier(clf)?;
    same_encoding(&generator, &classifier)?;
    eprintln!(
        "generator parameters: {}, classifier parameters: {} (frozen)",
        generator.param_count(),
        classifier.param_count()
    );
    let records = load_records(data)?;
    let (train, _, _) = split(&records, &cfg.split);
    let examples = lm_examples(&train, generator.config().encoding)?;
    let (refined, report) = refine(generator, &classifier, &examples, &cfg.refine)?;
    checkpoint::save(out, &refined.to_checkpoint())
        .with_context(|| format!("writing {}", out.display()))?;
    let mut log = format!(
        "# refine {} -> {}\n{}\n",
        lm.display(),
        out.display(),
        RefineStep::TSV_HEADER
    );
    for s in &report.steps {
        log += &s.to_tsv();
        log.push('\n');
    }
    append_log(cfg, &log)?;
    if let Some((first, last)) = report.p_valid_trend(20) {
        eprintln!("mean rollout p_valid {first:.4} -> {last:.4}");
    }
    Ok(())
}

fn sample(
    cfg: &Config,
    lm: &Path,
    n: usize,
    seed: u64,
    encoding: Option<EncodingMode>,
) -> Result<()> {
    let generator = load_generator(lm)?;
    let mode = generator.config().encoding;
    if let Some(want) = encoding {
        if want != mode {
            bail!(Usage(format!(
                "checkpoint generates {mode} netlists, not {want}"
            )));
        }
    }
    eprintln!("generator parameters: {}", generator.param_count());
    let set = generate_unique(
        &generator,
        n,
        &cfg.decode,
        n * cfg.eval.attempts_per_unique,
        seed,
    )?;
    let mut stdout = std::io::stdout().lock();
    for s in &set.samples {
        writeln!(
            stdout,
            "# pool={} duty={}\n{}\n",
            s.topology.pool(),
            s.duty,
            s.text
        )?;
    }
    eprintln!(
        "{} unique of {} attempts ({} unparseable, {} duplicates)",
        set.samples.len(),
        set.attempts,
        set.unparseable,
        set.duplicates
    );
    if set.exhausted {
        eprintln!("warning: attempt budget exhausted before {n} unique samples");
    }
    Ok(())
}

fn eval(cfg: &Config, lm: &Path, clf: &Path, prefix: &str, force: bool) -> Result<()> {
    let report_path = PathBuf::from(format!("{prefix}.report.tsv"));
    let samples_path = PathBuf::from(format!("{prefix}.samples.tsv"));
    let hist_path = PathBuf::from(format!("{prefix}.hist.tsv"));
    ensure_writable(&[&report_path, &samples_path, &hist_path], force)?;
    let generator = load_generator(lm)?;
    let classifier = load_classifier(clf)?;
    same_encoding(&generator, &classifier)?;
    eprintln!(
        "generator parameters: {}, classifier parameters: {}",
        generator.param_count(),
        classifier.param_count()
    );
    let n = cfg.eval.n_unique;
    let set = generate_unique(
        &generator,
        n,
        &cfg.decode,
        n * cfg.eval.attempts_per_unique,
        cfg.eval.seed,
    )?;
    let e = eval_metrics(&set, &classifier, &cfg.sim, cfg.eval.threshold)?;
    let mut samples = String::from("pool\tduty\tp_valid\tsim_valid\tefficiency\tnetlist\n");
    for (s, score) in set.samples.iter().zip(&e.scores) {
        samples += &format!(
            "{}\t{}\t{:.10}\t{}\t{:.10}\t{}\n",
            s.topology.pool(),
            s.duty,
            score.p_valid,
            score.sim_valid,
            score.efficiency,
            s.text
        );
    }
    fs::write(&report_path, e.report.to_tsv())
        .with_context(|| format!("writing {}", report_path.display()))?;
    fs::write(&samples_path, samples)
        .with_context(|| format!("writing {}", samples_path.display()))?;
    fs::write(
        &hist_path,
        p_valid_histogram(&e.scores, cfg.eval.histogram_bins),
    )
    .with_context(|| format!("writing {}", hist_path.display()))?;
    print!("{}", e.report.to_tsv());
    if set.exhausted {
        eprintln!(
            "warning: attempt budget exhausted at {} unique samples",
            set.samples.len()
        );
    }
    Ok(())
}

fn pipeline_config(cfg: &Config) -> PipelineConfig {
    PipelineConfig {
        classifier: cfg.clf.clone(),
        classifier_train: cfg.clf_train.clone(),
        generator: cfg.lm.clone(),
        pretrain: cfg.lm_train.clone(),
        refine: cfg.refine.clone(),
        decode: cfg.decode.clone(),
        n_unique: cfg.eval.n_unique,
        eval_seed: cfg.eval.seed,
        threshold: cfg.eval.threshold,
        sim: cfg.sim.clone(),
    }
}

fn ablate(cfg: &Config, out: &Path, force: bool) -> Result<()> {
    ensure_writable(&[out], force)?;
    let records = if cfg.ablate_data.is_empty() {
        generate_dataset(cfg.data_n, &cfg.sim, &cfg.data).0
    } else {
        load_records(Path::new(&cfg.ablate_data))?
    };
    let (train, val, _) = split(&records, &cfg.split);
    let outcomes = ablation_run(&train, &val, &pipeline_config(cfg))?;
    let mut log = String::new();
    for o in &outcomes {
        log += &format!("# ablate refine ({})\n{}\n", o.mode, RefineStep::TSV_HEADER);
        for s in &o.refine.steps {
            log += &s.to_tsv();
            log.push('\n');
        }
    }
    append_log(cfg, &log)?;
    let table = comparison_table(&outcomes);
    fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    print!("{table}");
    Ok(())
}
