use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use noisyood::classifier::{self, MlpSpec, TrainConfig};
use noisyood::detectors::{self, DetectorConfig, FeatureSet, FitContext, LabelSource, Method};
use noisyood::harness::{self, HarnessError, RunMatrixConfig, RunOptions};
use noisyood::metrics::auroc_triple;
use noisyood::noise::{attach_noisy_labels, estimate_transition, FlipCount, NoiseModel, NoiseSpec, TransitionMatrix};
use noisyood::synth::{generate, HypercubeConfig, MixtureSpec};
use noisyood::tensor_io::{read_bundle, SplitSet, Tensor, TensorBundle, LABEL};

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "noisyood", version, about = "Post-hoc OOD detection under label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic Gaussian-mixture split set.
    GenData(GenData),
    /// Add noisy training labels to a split set.
    InjectNoise(InjectNoise),
    /// Train an MLP and save its early and last checkpoints.
    Train(Train),
    /// Run a model over every split and write detector-ready bundles.
    Extract(Extract),
    /// Fit a detector on extracted features.
    Fit(Fit),
    /// Score one bundle with a fitted detector.
    Score(Score),
    /// AUROCs of a fitted detector on an extracted split set.
    Evaluate(Evaluate),
    /// Run a full experiment matrix and write reports.
    Benchmark(Benchmark),
    /// Rewrite reports from the cell markers of a previous benchmark.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    /// Hypercube mixture parameters (TOML); built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InjectNoise {
    /// Split set directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_noise_model)]
    model: NoiseModel,
    /// Flip rate for `su`.
    #[arg(long)]
    rate: Option<f64>,
    /// Transition matrix for `scc` as a JSON array of rows.
    #[arg(long)]
    transition: Option<PathBuf>,
    /// Tensor in the train bundle holding labels for `real`.
    #[arg(long)]
    label_key: Option<String>,
    /// Flip each label independently instead of exactly round(rate * N).
    #[arg(long)]
    bernoulli: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Training label tensor, e.g. `label.noisy.su_0.2`.
    #[arg(long, default_value = LABEL)]
    labels: String,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives `early/` and `last/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Extract {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Fit {
    #[arg(long)]
    method: Method,
    /// Extracted split set.
    #[arg(long)]
    features: PathBuf,
    /// Needed by ODIN and GradNorm.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "TRAIN", value_parser = parse_label_source)]
    label_source: LabelSource,
    /// Training label tensor in the train bundle.
    #[arg(long, default_value = LABEL)]
    labels: String,
    /// Detector hyperparameters (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Score {
    #[arg(long)]
    detector: PathBuf,
    /// One extracted bundle.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV with one score per line; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Benchmark {
    /// Run matrix (TOML); the built-in desk matrix otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Reuse cached models and completed cells.
    #[arg(long)]
    resume: bool,
    /// Replace the configured training seeds with this one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory of the benchmark.
    #[arg(long)]
    out: PathBuf,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn parse_noise_model(s: &str) -> Result<NoiseModel, String> {
    match s.to_ascii_lowercase().as_str() {
        "su" => Ok(NoiseModel::Su),
        "scc" => Ok(NoiseModel::Scc),
        "real" => Ok(NoiseModel::Real),
        other => Err(format!("unknown noise model `{other}` (su, scc, real)")),
    }
}

fn parse_label_source(s: &str) -> Result<LabelSource, String> {
    match s.to_ascii_uppercase().as_str() {
        "TRAIN" => Ok(LabelSource::Train),
        "VAL" => Ok(LabelSource::Val),
        other => Err(format!("unknown label source `{other}` (TRAIN, VAL)")),
    }
}

/// Marks an error as the caller's configuration problem.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn harness_err(e: HarnessError) -> anyhow::Error {
    if e.is_config() {
        config_err(e.to_string())
    } else {
        e.into()
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_matrix(path: Option<&Path>) -> Result<RunMatrixConfig> {
    match path {
        Some(p) => RunMatrixConfig::from_toml(&read_text(p)?).map_err(harness_err),
        None => Ok(harness::desk_config()),
    }
}

fn gen_data(a: GenData) -> Result<u8> {
    let mut cfg: HypercubeConfig = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| config_err(e.to_string()))?,
        None => HypercubeConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let spec = MixtureSpec::hypercube(&cfg).map_err(|e| config_err(e.to_string()))?;
    let set = generate(&spec)?;
    set.write(&a.out)?;
    let (acc, se) = noisyood::synth::bayes_accuracy(&spec, 20_000, cfg.seed);
    println!("wrote {} (train {}, test {}, {} OOD sets); Bayes accuracy {acc:.4} +- {se:.4}", a.out.display(), set.train.len(), set.test.len(), set.ood_sets.len());
    Ok(0)
}

fn inject_noise(a: InjectNoise) -> Result<u8> {
    let mut set = SplitSet::read(&a.data)?;
    let clean = set.train.labels(LABEL)?;
    let classes = set.num_classes().ok_or_else(|| anyhow!("train bundle has no labels"))?;
    let spec = match a.model {
        NoiseModel::Su => {
            let rate = a.rate.ok_or_else(|| config_err("su noise needs --rate"))?;
            let flip_count = if a.bernoulli { FlipCount::Bernoulli } else { FlipCount::Exact };
            NoiseSpec { flip_count, ..NoiseSpec::uniform(rate, a.seed) }
        }
        NoiseModel::Scc => {
            let path = a.transition.as_ref().ok_or_else(|| config_err("scc noise needs --transition"))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&read_text(path)?).map_err(|e| config_err(e.to_string()))?;
            NoiseSpec::class_conditional(TransitionMatrix::new(rows).map_err(|e| config_err(e.to_string()))?, a.seed)
        }
        NoiseModel::Real => {
            let key = a.label_key.as_deref().ok_or_else(|| config_err("real noise needs --label-key"))?;
            NoiseSpec::real(set.train.labels(key)?)
        }
    };
    let noisy = spec.apply(&clean, classes).map_err(|e| config_err(e.to_string()))?;
    let (_, rate) = estimate_transition(&clean, &noisy, classes)?;
    let tag = spec.tag();
    attach_noisy_labels(&mut set.train, &tag, &spec, &noisy);
    set.write(&a.out)?;
    println!("label.noisy.{tag}: realised rate {rate:.4}");
    Ok(0)
}

fn train(a: Train) -> Result<u8> {
    let set = SplitSet::read(&a.data)?;
    let mut train = set.train.clone();
    if a.labels != LABEL {
        let y = train.labels(&a.labels).map_err(|e| config_err(e.to_string()))?;
        train.insert(LABEL, Tensor::from_labels(&y));
    }
    let input_dim = train.matrix(noisyood::tensor_io::FEAT)?.ncols();
    let num_classes = set.num_classes().ok_or_else(|| anyhow!("train bundle has no labels"))?;
    let spec = MlpSpec { input_dim, hidden_dims: a.hidden, num_classes, seed: a.seed };
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, momentum: a.momentum };
    let pair = classifier::train(&spec, &train, &set.val, &cfg).map_err(|e| config_err(e.to_string()))?;
    classifier::save_model(&pair.early, &a.out.join("early"))?;
    classifier::save_model(&pair.last, &a.out.join("last"))?;
    let (_, acc) = classifier::evaluate(&pair.last, set.test.matrix(noisyood::tensor_io::FEAT)?.view(), &set.test.labels(LABEL)?)?;
    println!("early checkpoint: epoch {}; last: epoch {}; last test accuracy {acc:.4}", pair.early.epoch, pair.last.epoch);
    Ok(0)
}

fn extract(a: Extract) -> Result<u8> {
    let model = classifier::load_model(&a.model)?;
    let set = SplitSet::read(&a.data)?;
    let ex = |b: &TensorBundle| classifier::export_bundle(&model, b, true);
    let out = SplitSet {
        train: ex(&set.train)?,
        val: ex(&set.val)?,
        test: ex(&set.test)?,
        ood_val: set.ood_val.as_ref().map(ex).transpose()?,
        ood_sets: set.ood_sets.iter().map(|(n, b)| Ok((n.clone(), ex(b)?))).collect::<Result<_>>()?,
    };
    out.write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn load_detector_config(path: Option<&Path>) -> Result<DetectorConfig> {
    let Some(p) = path else { return Ok(DetectorConfig::default()) };
    let text = read_text(p)?;
    if p.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| config_err(e.to_string()))
    }
}

fn fit(a: Fit) -> Result<u8> {
    let set = SplitSet::read(&a.features)?;
    let model = a.model.as_deref().map(classifier::load_model).transpose()?;
    let train = FeatureSet::from_bundle(&set.train, Some(&a.labels))?;
    let val = FeatureSet::from_bundle(&set.val, None)?;
    let ood_val = set.ood_val.as_ref().map(|b| FeatureSet::from_bundle(b, None)).transpose()?;
    let head = match (set.train.get("head.W"), set.train.get("head.b")) {
        (Some(_), Some(_)) => Some(classifier::Linear { weight: set.train.matrix("head.W")?, bias: set.train.matrix("head.b")?.column(0).to_owned() }),
        _ => None,
    };
    let ctx = FitContext { id_train: &train, id_val: &val, ood_val: ood_val.as_ref(), model: model.as_ref(), head: head.as_ref(), label_source: a.label_source };
    let cfg = load_detector_config(a.config.as_deref())?;
    let state = detectors::fit(a.method, &ctx, &cfg)?;
    detectors::save_state(&state, &a.out)?;
    let hp: Vec<String> = state.hyperparameters().iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("fitted {} [{}]", state.method(), hp.join(", "));
    Ok(0)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| p.display().to_string()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn score(a: Score) -> Result<u8> {
    let state = detectors::load_state(&a.detector)?;
    let model = a.model.as_deref().map(classifier::load_model).transpose()?;
    let data = FeatureSet::from_bundle(&read_bundle(&a.features)?, None)?;
    let scores = state.score(&data, model.as_ref())?;
    let mut text = String::from("score\n");
    for s in scores {
        text.push_str(&format!("{s}\n"));
    }
    write_or_print(a.out.as_deref(), &text)?;
    Ok(0)
}

fn evaluate(a: Evaluate) -> Result<u8> {
    let state = detectors::load_state(&a.detector)?;
    let model = a.model.as_deref().map(classifier::load_model).transpose()?;
    let set = SplitSet::read(&a.features)?;
    let test = FeatureSet::from_bundle(&set.test, None)?;
    let labels = test.labels.clone().ok_or_else(|| anyhow!("test bundle has no labels"))?;
    let correct: Vec<bool> = test.predictions().iter().zip(&labels).map(|(p, y)| p == y).collect();
    let id = state.score(&test, model.as_ref())?;
    let mut text = String::from("ood_set,auroc_id,auroc_correct,auroc_incorrect,n_correct,n_incorrect,n_ood\n");
    for (name, b) in &set.ood_sets {
        let ood = state.score(&FeatureSet::from_bundle(b, None)?, model.as_ref())?;
        let t = auroc_triple(&id, &correct, &ood)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            t.id_vs_ood,
            opt(t.correct_vs_ood),
            opt(t.incorrect_vs_ood),
            t.n_correct,
            t.n_incorrect,
            t.n_ood
        ));
    }
    write_or_print(a.out.as_deref(), &text)?;
    Ok(0)
}

fn benchmark(a: Benchmark) -> Result<u8> {
    let mut cfg = load_matrix(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.training.seeds = vec![s];
    }
    let planned = harness::planned_for(&cfg).map_err(harness_err)?;
    println!("{planned} (cell, OOD set) pairs planned");
    let opts = RunOptions { out_dir: a.out.clone(), workers: a.workers, resume: a.resume };
    let (report, stats) = harness::benchmark(&cfg, &opts).map_err(harness_err)?;
    println!(
        "{} rows, {} failures; {} models trained, {} loaded; {} cells computed, {} resumed; reports in {}",
        report.rows.len(),
        report.failures.len(),
        stats.models_trained,
        stats.models_loaded,
        stats.cells_computed,
        stats.cells_resumed,
        a.out.display()
    );
    Ok(if report.failures.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn report(a: Report) -> Result<u8> {
    let cfg = match &a.config {
        Some(p) => load_matrix(Some(p))?,
        None => {
            let echo = a.out.join("config.toml");
            if echo.exists() {
                load_matrix(Some(&echo))?
            } else {
                bail!(config_err(format!("no --config and no {}", echo.display())))
            }
        }
    };
    let report = harness::report_from_markers(&cfg, &a.out).map_err(harness_err)?;
    harness::emit_reports(&report, &a.out).map_err(harness_err)?;
    println!("{} rows, {} failures; reports in {}", report.rows.len(), report.failures.len(), a.out.display());
    Ok(if report.failures.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::InjectNoise(a) => inject_noise(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Fit(a) => fit(a),
        Command::Score(a) => score(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
