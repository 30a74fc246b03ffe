//! Executes a run matrix: noise injection, training, feature export,
//! detector fitting and scoring, AUROC evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Checkpoint, DatasetSource, NoiseSetting, RunMatrixConfig};
use super::HarnessError;
use crate::classifier::{self, ClassifierModel, Linear, MlpSpec};
use crate::detectors::{self, DetectorState, FeatureSet, FitContext, LabelSource, Method};
use crate::metrics::auroc_triple;
use crate::noise::{estimate_transition, NoiseModel, NoiseSpec};
use crate::synth::{generate, MixtureSpec};
use crate::tensor_io::{SplitSet, TensorBundle, FEAT, LABEL};

/// Identifies one detector evaluation; each yields a row per OOD set.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub dataset: String,
    /// Architecture name; empty when the matrix has a single architecture
    /// or the dataset is external.
    pub arch: String,
    pub noise_model: NoiseModel,
    /// Shortest round-trip rendering of the rate.
    pub noise_rate: String,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub label_source: LabelSource,
    pub detector: Method,
}

impl CellKey {
    /// Value of the `dataset` report column.
    pub fn dataset_label(&self) -> String {
        if self.arch.is_empty() {
            self.dataset.clone()
        } else {
            format!("{}.{}", self.dataset, self.arch)
        }
    }

    /// File-system safe identifier.
    pub fn id(&self) -> String {
        format!(
            "{}__{}_{}__s{}__{}__{}__{}",
            sanitize(&self.dataset_label()),
            self.noise_model.tag(),
            self.noise_rate,
            self.seed,
            self.checkpoint.name(),
            self.label_source.name(),
            self.detector.name()
        )
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub key: CellKey,
    pub ood_set: String,
    pub auroc_id: f64,
    pub auroc_correct: Option<f64>,
    pub auroc_incorrect: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub n_ood: usize,
    pub id_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub key: CellKey,
    pub ood_set: String,
    pub cause: String,
}

/// Outcome of one cell as persisted in its completion marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: CellKey,
    pub rows: Vec<Row>,
    pub failures: Vec<Failure>,
    pub hyperparameters: BTreeMap<String, f64>,
    /// CRC32 over the little-endian bytes of every score the cell produced.
    pub score_digest: Option<u32>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    pub resume: bool,
}

/// Counters about the execution itself; never written to report files so
/// that reports stay byte-identical across resumed runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub models_trained: usize,
    pub models_loaded: usize,
    pub cells_computed: usize,
    pub cells_resumed: usize,
}

struct LoadedDataset {
    name: String,
    splits: SplitSet,
    external: bool,
    head: Option<Linear>,
}

fn load_dataset(src: &DatasetSource) -> Result<LoadedDataset, HarnessError> {
    match src {
        DatasetSource::Synthetic { name, hypercube } => {
            let spec = MixtureSpec::hypercube(hypercube).map_err(|e| HarnessError::Config(e.to_string()))?;
            let splits = generate(&spec).map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(LoadedDataset { name: name.clone(), splits, external: false, head: None })
        }
        DatasetSource::Bundles { name, path } => {
            let splits = SplitSet::read(path).map_err(|e| HarnessError::Config(format!("dataset `{name}`: {e}")))?;
            let head = match (splits.train.get("head.W"), splits.train.get("head.b")) {
                (Some(_), Some(_)) => {
                    let weight = splits.train.matrix("head.W")?;
                    let bias = splits.train.matrix("head.b")?.column(0).to_owned();
                    Some(Linear { weight, bias })
                }
                _ => None,
            };
            Ok(LoadedDataset { name: name.clone(), splits, external: true, head })
        }
    }
}

/// Number of (cell, OOD set) pairs the matrix will produce.
pub fn planned_rows(cfg: &RunMatrixConfig, datasets_ood: &[(bool, usize)]) -> usize {
    let per_model = cfg.label_sources.len() * cfg.detectors.len();
    let noise = cfg.noise_settings().len();
    let units = cfg.training.architectures.len() * cfg.training.seeds.len();
    datasets_ood
        .iter()
        .map(|&(external, oods)| {
            let ckpts = if external { 1 } else { cfg.checkpoints.len() };
            let archs = if external { cfg.training.seeds.len() } else { units };
            noise * archs * ckpts * per_model * oods
        })
        .sum()
}

/// One classifier-level unit of work: a (dataset, noise, architecture, seed)
/// combination sharing noisy labels and a training run.
struct Unit<'a> {
    data: &'a LoadedDataset,
    noise: &'a NoiseSetting,
    arch_index: usize,
    seed: u64,
}

pub fn run_matrix(cfg: &RunMatrixConfig, opts: &RunOptions) -> Result<(Vec<CellRecord>, RunStats), HarnessError> {
    cfg.validate()?;
    let datasets: Vec<LoadedDataset> = cfg.datasets.iter().map(load_dataset).collect::<Result<_, _>>()?;
    let noise = cfg.noise_settings();
    let total = planned_rows(cfg, &datasets.iter().map(|d| (d.external, d.splits.ood_sets.len())).collect::<Vec<_>>());
    log::info!("run matrix `{}`: {total} (cell, ood set) pairs", cfg.name);

    let mut units = Vec::new();
    for data in &datasets {
        for n in &noise {
            let archs = if data.external { 1 } else { cfg.training.architectures.len() };
            for arch_index in 0..archs {
                for &seed in &cfg.training.seeds {
                    units.push(Unit { data, noise: n, arch_index, seed });
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let results: Vec<(Vec<CellRecord>, RunStats)> = pool.install(|| units.par_iter().map(|u| run_unit(cfg, opts, u)).collect());
    let mut stats = RunStats::default();
    let mut records = Vec::new();
    for (r, s) in results {
        records.extend(r);
        stats.models_trained += s.models_trained;
        stats.models_loaded += s.models_loaded;
        stats.cells_computed += s.cells_computed;
        stats.cells_resumed += s.cells_resumed;
    }
    Ok((records, stats))
}

fn rate_string(r: f64) -> String {
    format!("{r}")
}

fn noise_spec(setting: &NoiseSetting, seed: u64, train: &TensorBundle) -> Result<NoiseSpec, String> {
    Ok(match setting.model {
        NoiseModel::Su => NoiseSpec { flip_count: setting.flip_count, ..NoiseSpec::uniform(setting.rate.unwrap_or(0.0), seed) },
        NoiseModel::Scc => NoiseSpec::class_conditional(setting.transition.clone().expect("validated"), seed),
        NoiseModel::Real => {
            let key = setting.label_key.as_deref().expect("validated");
            NoiseSpec::real(train.labels(key).map_err(|e| e.to_string())?)
        }
    })
}

/// Runs all cells of one unit, returning them in configuration order.
fn run_unit(cfg: &RunMatrixConfig, opts: &RunOptions, unit: &Unit) -> (Vec<CellRecord>, RunStats) {
    let data = unit.data;
    let arch = &cfg.training.architectures[unit.arch_index];
    let arch_label = if data.external || cfg.training.architectures.len() == 1 { String::new() } else { arch.name.clone() };
    let dataset_label = if arch_label.is_empty() { data.name.clone() } else { format!("{}.{}", data.name, arch_label) };
    let checkpoints: Vec<Checkpoint> = if data.external { vec![Checkpoint::None] } else { cfg.checkpoints.clone() };
    let ood_names: Vec<String> = data.splits.ood_sets.iter().map(|(n, _)| n.clone()).collect();
    let mut stats = RunStats::default();

    let clean = data.splits.train.labels(LABEL);
    let classes = data.splits.num_classes().unwrap_or(0);
    // noise injection and the realised rate
    let prepared = clean.map_err(|e| e.to_string()).and_then(|clean| {
        let spec = noise_spec(unit.noise, unit.seed, &data.splits.train)?;
        let noisy = spec.apply(&clean, classes).map_err(|e| e.to_string())?;
        let rate = match unit.noise.rate {
            Some(r) => r,
            None => estimate_transition(&clean, &noisy, classes).map(|(_, r)| r).map_err(|e| e.to_string())?,
        };
        Ok((noisy, rate))
    });
    let rate_label = match &prepared {
        Ok((_, r)) => rate_string(*r),
        Err(_) => unit.noise.rate.map(rate_string).unwrap_or_else(|| "nan".into()),
    };
    let key_for = |checkpoint: Checkpoint, label_source: LabelSource, detector: Method| CellKey {
        dataset: data.name.clone(),
        arch: arch_label.clone(),
        noise_model: unit.noise.model,
        noise_rate: rate_label.clone(),
        seed: unit.seed,
        checkpoint,
        label_source,
        detector,
    };
    let all_failed = |cause: &str| -> Vec<CellRecord> {
        let mut out = Vec::new();
        for &c in &checkpoints {
            for &ls in &cfg.label_sources {
                for &d in &cfg.detectors {
                    let key = key_for(c, ls, d);
                    let failures = ood_names.iter().map(|o| Failure { key: key.clone(), ood_set: o.clone(), cause: cause.to_string() }).collect();
                    out.push(CellRecord { key, rows: Vec::new(), failures, hyperparameters: BTreeMap::new(), score_digest: None });
                }
            }
        }
        out
    };
    let (noisy, _) = match prepared {
        Ok(p) => p,
        Err(cause) => return (all_failed(&cause), stats),
    };

    let unit_dir = opts.out_dir.join("cache").join("models").join(sanitize(&dataset_label)).join(format!(
        "{}_{}",
        unit.noise.model.tag(),
        rate_label
    ));
    let unit_dir = unit_dir.join(format!("seed{}", unit.seed));

    // (checkpoint, model) pairs; external data has no model
    let models: Vec<(Checkpoint, Option<ClassifierModel>)> = if data.external {
        vec![(Checkpoint::None, None)]
    } else {
        match obtain_models(cfg, opts, unit, &arch.hidden_dims, &noisy, &unit_dir, &mut stats) {
            Ok((early, last)) => {
                checkpoints.iter().map(|&c| (c, Some(if c == Checkpoint::Last { last.clone() } else { early.clone() }))).collect()
            }
            Err(cause) => return (all_failed(&cause), stats),
        }
    };

    let mut records = Vec::new();
    for (checkpoint, model) in &models {
        let sets = match feature_sets(data, model.as_ref(), &noisy) {
            Ok(s) => s,
            Err(cause) => {
                records.extend(all_failed(&cause).into_iter().filter(|r| r.key.checkpoint == *checkpoint));
                continue;
            }
        };
        for &label_source in &cfg.label_sources {
            for &detector in &cfg.detectors {
                let key = key_for(*checkpoint, label_source, detector);
                let marker = opts.out_dir.join("cache").join("cells").join(format!("{}.json", key.id()));
                if opts.resume {
                    if let Some(rec) = read_marker(&marker, &key) {
                        stats.cells_resumed += 1;
                        records.push(rec);
                        continue;
                    }
                }
                let rec = run_cell(cfg, &key, &sets, model.as_ref(), data.head.as_ref(), &ood_names);
                stats.cells_computed += 1;
                if let Err(e) = write_marker(&marker, &rec) {
                    log::warn!("could not write marker for {}: {e}", key.id());
                }
                records.push(rec);
            }
        }
    }
    (records, stats)
}

fn obtain_models(
    cfg: &RunMatrixConfig,
    opts: &RunOptions,
    unit: &Unit,
    hidden_dims: &[usize],
    noisy: &[usize],
    dir: &Path,
    stats: &mut RunStats,
) -> Result<(ClassifierModel, ClassifierModel), String> {
    let (early_dir, last_dir) = (dir.join("early"), dir.join("last"));
    if opts.resume && early_dir.join(crate::tensor_io::MANIFEST_FILE).exists() && last_dir.join(crate::tensor_io::MANIFEST_FILE).exists() {
        if let (Ok(e), Ok(l)) = (classifier::load_model(&early_dir), classifier::load_model(&last_dir)) {
            stats.models_loaded += 1;
            return Ok((e, l));
        }
    }
    let splits = &unit.data.splits;
    let mut train = splits.train.clone();
    train.insert(LABEL, crate::tensor_io::Tensor::from_labels(noisy));
    let input_dim = train.require(FEAT).map_err(|e| e.to_string())?.shape()[1];
    let spec = MlpSpec {
        input_dim,
        hidden_dims: hidden_dims.to_vec(),
        num_classes: splits.num_classes().unwrap_or(0),
        seed: unit.seed,
    };
    let pair = classifier::train(&spec, &train, &splits.val, &cfg.training.train_config()).map_err(|e| e.to_string())?;
    stats.models_trained += 1;
    for (m, d) in [(&pair.early, &early_dir), (&pair.last, &last_dir)] {
        if let Err(e) = classifier::save_model(m, d) {
            log::warn!("could not cache model in {}: {e}", d.display());
        }
    }
    Ok((pair.early, pair.last))
}

pub(crate) struct Sets {
    pub train: FeatureSet,
    pub val: FeatureSet,
    pub test: FeatureSet,
    pub ood_val: Option<FeatureSet>,
    pub oods: Vec<FeatureSet>,
}

fn trace_set(model: &ClassifierModel, bundle: &TensorBundle, labels: Option<Vec<usize>>) -> Result<FeatureSet, String> {
    let x = bundle.matrix(FEAT).map_err(|e| e.to_string())?;
    let trace = model.forward_trace(x.view()).map_err(|e| e.to_string())?;
    Ok(FeatureSet::from_trace(trace, Some(x), labels))
}

fn feature_sets(data: &LoadedDataset, model: Option<&ClassifierModel>, noisy: &[usize]) -> Result<Sets, String> {
    let s = &data.splits;
    let labels = |b: &TensorBundle| b.labels(LABEL).map_err(|e| e.to_string());
    let build = |b: &TensorBundle, y: Option<Vec<usize>>| -> Result<FeatureSet, String> {
        match model {
            Some(m) => trace_set(m, b, y),
            None => {
                let mut f = FeatureSet::from_bundle(b, None).map_err(|e| e.to_string())?;
                f.labels = y;
                Ok(f)
            }
        }
    };
    Ok(Sets {
        train: build(&s.train, Some(noisy.to_vec()))?,
        val: build(&s.val, Some(labels(&s.val)?))?,
        test: build(&s.test, Some(labels(&s.test)?))?,
        ood_val: s.ood_val.as_ref().map(|b| build(b, None)).transpose()?,
        oods: s.ood_sets.iter().map(|(_, b)| build(b, None)).collect::<Result<_, _>>()?,
    })
}

fn digest(hasher: &mut crc32fast::Hasher, scores: &[f64]) {
    for s in scores {
        hasher.update(&s.to_le_bytes());
    }
}

pub(crate) fn run_cell(
    cfg: &RunMatrixConfig,
    key: &CellKey,
    sets: &Sets,
    model: Option<&ClassifierModel>,
    head: Option<&Linear>,
    ood_names: &[String],
) -> CellRecord {
    let fail = |cause: String| CellRecord {
        key: key.clone(),
        rows: Vec::new(),
        failures: ood_names.iter().map(|o| Failure { key: key.clone(), ood_set: o.clone(), cause: cause.clone() }).collect(),
        hyperparameters: BTreeMap::new(),
        score_digest: None,
    };
    let ctx = FitContext {
        id_train: &sets.train,
        id_val: &sets.val,
        ood_val: sets.ood_val.as_ref(),
        model,
        head,
        label_source: key.label_source,
    };
    let state: DetectorState = match detectors::fit(key.detector, &ctx, &cfg.detector_config(key.detector)) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let id_scores = match state.score(&sets.test, model) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let mut hasher = crc32fast::Hasher::new();
    digest(&mut hasher, &id_scores);
    let test_labels = sets.test.labels.as_deref().unwrap_or(&[]);
    let correct: Vec<bool> = sets.test.predictions().iter().zip(test_labels).map(|(p, y)| p == y).collect();
    let id_accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, ood) in ood_names.iter().zip(&sets.oods) {
        let outcome = state
            .score(ood, model)
            .map_err(|e| e.to_string())
            .and_then(|s| {
                digest(&mut hasher, &s);
                auroc_triple(&id_scores, &correct, &s).map_err(|e| e.to_string())
            });
        match outcome {
            Ok(t) => rows.push(Row {
                key: key.clone(),
                ood_set: name.clone(),
                auroc_id: t.id_vs_ood,
                auroc_correct: t.correct_vs_ood,
                auroc_incorrect: t.incorrect_vs_ood,
                n_correct: t.n_correct,
                n_incorrect: t.n_incorrect,
                n_ood: t.n_ood,
                id_accuracy,
            }),
            Err(cause) => failures.push(Failure { key: key.clone(), ood_set: name.clone(), cause }),
        }
    }
    let hyperparameters = state.hyperparameters().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    CellRecord { key: key.clone(), rows, failures, hyperparameters, score_digest: Some(hasher.finalize()) }
}

fn read_marker(path: &Path, key: &CellKey) -> Option<CellRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.key == *key).then_some(rec)
}

fn write_marker(path: &Path, rec: &CellRecord) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    // write-then-rename so an interrupted run never leaves a torn marker
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string(rec).expect("record serializes"))?;
    std::fs::rename(tmp, path)
}

/// Exports a model's outputs on a bundle as a detector-ready feature set,
/// `ood` sets carrying no labels.
pub fn features_for(model: &ClassifierModel, bundle: &TensorBundle, with_labels: bool) -> Result<FeatureSet, HarnessError> {
    let labels = if with_labels { Some(bundle.labels(LABEL)?) } else { None };
    trace_set(model, bundle, labels).map_err(HarnessError::Run)
}
