//! Post-hoc OOD detectors as fit/score pairs.
//!
//! Every score is oriented so that higher means "more in-distribution".
//! A detector is fitted once from a [`FitContext`] into an immutable
//! [`DetectorState`], which then scores any [`FeatureSet`].

mod activation;
mod distance;
mod gram;
mod logit;
mod odin;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use activation::{
    ash_features, ash_s, dice_head, dice_keep, fold_rows, head_energy, rankfeat_features, rankfeat_residual, react_features,
};
pub use distance::{
    correct_class_means, knn_scores, l2_normalize, logistic_weights, mds, mds_ensemble, rmds, she, vim_alpha, OpenMaxState,
    VimSubspace,
};
pub use gram::{delta, gram_features, GramState, LayerBounds};
pub use logit::{energy, fit_temperature, gen_score, gradnorm, kl_floored, klm, mls, msp, nll, KL_FLOOR};
pub use odin::{odin_scores, perturb, MAGNITUDE_GRID, TEMPERATURE_GRID};

use crate::classifier::{argmax, ClassifierModel, ForwardTrace, Linear, ModelError};
use crate::metrics::{auroc, MetricError};
use crate::numerics::{fit_gaussian_stats, percentile, GaussianStats, NumericsError};
use crate::tensor_io::{BundleError, TensorBundle, ACT_PREFIX, FEAT, INPUT, LABEL, LOGIT};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("missing {0}")]
    Missing(&'static str),
    #[error("invalid detector input: {0}")]
    Invalid(String),
    #[error("unknown detector `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("state file: {0}")]
    State(String),
}

type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MSP")]
    Msp,
    #[serde(rename = "TempScale")]
    TempScale,
    #[serde(rename = "ODIN")]
    Odin,
    #[serde(rename = "ODIN_notemp")]
    OdinNoTemp,
    #[serde(rename = "ODIN_nopert")]
    OdinNoPert,
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "MLS")]
    Mls,
    #[serde(rename = "EBO")]
    Ebo,
    #[serde(rename = "ReAct")]
    ReAct,
    #[serde(rename = "RankFeat")]
    RankFeat,
    #[serde(rename = "DICE")]
    Dice,
    #[serde(rename = "ASH")]
    Ash,
    #[serde(rename = "MDS")]
    Mds,
    #[serde(rename = "MDSEnsemble")]
    MdsEnsemble,
    #[serde(rename = "RMDS")]
    Rmds,
    #[serde(rename = "KLM")]
    Klm,
    #[serde(rename = "OpenMax")]
    OpenMax,
    #[serde(rename = "SHE")]
    She,
    #[serde(rename = "GRAM")]
    Gram,
    #[serde(rename = "KNN")]
    Knn,
    #[serde(rename = "VIM")]
    Vim,
    #[serde(rename = "GradNorm")]
    GradNorm,
}

impl Method {
    pub const ALL: [Method; 22] = [
        Method::Msp,
        Method::TempScale,
        Method::Odin,
        Method::OdinNoTemp,
        Method::OdinNoPert,
        Method::Gen,
        Method::Mls,
        Method::Ebo,
        Method::ReAct,
        Method::RankFeat,
        Method::Dice,
        Method::Ash,
        Method::Mds,
        Method::MdsEnsemble,
        Method::Rmds,
        Method::Klm,
        Method::OpenMax,
        Method::She,
        Method::Gram,
        Method::Knn,
        Method::Vim,
        Method::GradNorm,
    ];

    /// The twenty benchmark methods, without the two ODIN ablations.
    pub fn benchmark_set() -> Vec<Method> {
        Self::ALL.iter().copied().filter(|m| !matches!(m, Method::OdinNoTemp | Method::OdinNoPert)).collect()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Msp => "MSP",
            Method::TempScale => "TempScale",
            Method::Odin => "ODIN",
            Method::OdinNoTemp => "ODIN_notemp",
            Method::OdinNoPert => "ODIN_nopert",
            Method::Gen => "GEN",
            Method::Mls => "MLS",
            Method::Ebo => "EBO",
            Method::ReAct => "ReAct",
            Method::RankFeat => "RankFeat",
            Method::Dice => "DICE",
            Method::Ash => "ASH",
            Method::Mds => "MDS",
            Method::MdsEnsemble => "MDSEnsemble",
            Method::Rmds => "RMDS",
            Method::Klm => "KLM",
            Method::OpenMax => "OpenMax",
            Method::She => "SHE",
            Method::Gram => "GRAM",
            Method::Knn => "KNN",
            Method::Vim => "VIM",
            Method::GradNorm => "GradNorm",
        }
    }

    /// Methods whose fit consumes class labels, and so depend on the
    /// label source.
    pub fn uses_class_labels(&self) -> bool {
        matches!(self, Method::Mds | Method::Rmds | Method::MdsEnsemble | Method::Gram | Method::OpenMax | Method::She)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = DetectorError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DetectorError::Unknown(s.to_string()))
    }
}

/// Which labelled set class-statistic detectors are fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LabelSource {
    /// The (possibly noisy) training labels.
    Train,
    /// The clean validation labels.
    Val,
}

impl LabelSource {
    pub fn name(&self) -> &'static str {
        match self {
            LabelSource::Train => "TRAIN",
            LabelSource::Val => "VAL",
        }
    }
}

/// Per-sample model outputs a detector sees.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// Penultimate features, N x d.
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    /// Hidden-layer activations, first to last; the last is the penultimate
    /// layer. Holds just `features` when no per-layer trace was exported.
    pub layers: Vec<Array2<f64>>,
    /// Raw model inputs, needed only for input perturbation.
    pub inputs: Option<Array2<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl FeatureSet {
    pub fn from_trace(trace: ForwardTrace, inputs: Option<Array2<f64>>, labels: Option<Vec<usize>>) -> Self {
        Self { features: trace.penultimate().clone(), logits: trace.logits, layers: trace.activations, inputs, labels }
    }

    /// Reads `feat`, `logit` and, when present, `act.<i>`, `input` and the
    /// `label` tensor (or `label_key` instead).
    pub fn from_bundle(bundle: &TensorBundle, label_key: Option<&str>) -> Result<Self> {
        let features = bundle.matrix(FEAT)?;
        let logits = bundle.matrix(LOGIT)?;
        let mut acts: Vec<(usize, Array2<f64>)> = Vec::new();
        for key in bundle.tensors.keys() {
            if let Some(idx) = key.strip_prefix(ACT_PREFIX).and_then(|s| s.parse::<usize>().ok()) {
                acts.push((idx, bundle.matrix(key)?));
            }
        }
        acts.sort_by_key(|(i, _)| *i);
        let layers = if acts.is_empty() { vec![features.clone()] } else { acts.into_iter().map(|(_, a)| a).collect() };
        let inputs = bundle.get(INPUT).map(|_| bundle.matrix(INPUT)).transpose()?;
        let key = label_key.unwrap_or(LABEL);
        let labels = bundle.get(key).map(|_| bundle.labels(key)).transpose()?;
        let set = Self { features, logits, layers, inputs, labels };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.outer_iter().map(argmax).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        let mut ok = self.logits.nrows() == n && self.layers.iter().all(|a| a.nrows() == n);
        ok &= self.inputs.as_ref().is_none_or(|x| x.nrows() == n);
        ok &= self.labels.as_ref().is_none_or(|y| y.len() == n);
        if !ok {
            return Err(DetectorError::Invalid("per-sample arrays disagree on N".into()));
        }
        if self.layers.last().is_some_and(|l| l.ncols() != self.features.ncols()) {
            return Err(DetectorError::Invalid("last layer width differs from the penultimate features".into()));
        }
        if self.logits.ncols() < 2 {
            return Err(DetectorError::Invalid("need at least 2 logits".into()));
        }
        if self.features.iter().chain(self.logits.iter()).any(|v| !v.is_finite()) {
            return Err(DetectorError::Numerics(NumericsError::NonFinite));
        }
        Ok(())
    }

    fn labels_or(&self, what: &'static str) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(DetectorError::Missing(what))
    }
}

/// Everything a detector may consume while fitting.
#[derive(Clone, Copy)]
pub struct FitContext<'a> {
    /// Training outputs; `labels` are the labels the classifier was trained on.
    pub id_train: &'a FeatureSet,
    /// Validation outputs with clean labels.
    pub id_val: &'a FeatureSet,
    pub ood_val: Option<&'a FeatureSet>,
    pub model: Option<&'a ClassifierModel>,
    /// Output layer, when no model is available (external bundles).
    pub head: Option<&'a Linear>,
    pub label_source: LabelSource,
}

impl<'a> FitContext<'a> {
    fn head(&self) -> Result<Linear> {
        match (self.model, self.head) {
            (Some(m), _) => Ok(m.last_layer().clone()),
            (None, Some(h)) => Ok(h.clone()),
            (None, None) => Err(DetectorError::Missing("output layer weights")),
        }
    }

    /// The labelled set class-statistic methods fit on.
    fn class_set(&self) -> Result<(&'a FeatureSet, &'a [usize])> {
        match self.label_source {
            LabelSource::Train => Ok((self.id_train, self.id_train.labels_or("training labels")?)),
            LabelSource::Val => Ok((self.id_val, self.id_val.labels_or("validation labels")?)),
        }
    }

    fn ood_val(&self) -> Result<&'a FeatureSet> {
        self.ood_val.ok_or(DetectorError::Missing("ood_val"))
    }
}

/// Hyperparameter overrides; unset fields take the method defaults, and
/// tunable ones are tuned on `ood_val` when it is available.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// ODIN / TempScale / EBO / GradNorm temperature.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// ODIN perturbation magnitude.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    /// ReAct clip percentile, ASH pruning percentile or DICE sparsity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_m: Option<usize>,
    /// VIM principal subspace dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gram_orders: Option<usize>,
    /// Use `(q, 100 - q)` percentile bounds for GRAM instead of min/max.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gram_bound_percentile: Option<f64>,
    /// Set to false to skip tuning even when `ood_val` is present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tune: Option<bool>,
}

pub const REACT_PERCENTILE: f64 = 90.0;
pub const REACT_GRID: [f64; 4] = [85.0, 90.0, 95.0, 99.0];
pub const DICE_SPARSITY: f64 = 70.0;
pub const DICE_GRID: [f64; 5] = [10.0, 30.0, 50.0, 70.0, 90.0];
pub const ASH_PERCENTILE: f64 = 90.0;
pub const ASH_GRID: [f64; 7] = [65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0];
pub const GEN_GAMMA: f64 = 0.1;
pub const KNN_K: usize = 50;
pub const OPENMAX_TAIL: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum DetectorState {
    #[serde(rename = "MSP")]
    Msp,
    #[serde(rename = "TempScale")]
    TempScale { temperature: f64 },
    #[serde(rename = "ODIN")]
    Odin { variant: Method, temperature: f64, magnitude: f64 },
    #[serde(rename = "GEN")]
    Gen { gamma: f64, top_m: usize },
    #[serde(rename = "MLS")]
    Mls,
    #[serde(rename = "EBO")]
    Ebo { temperature: f64 },
    #[serde(rename = "ReAct")]
    ReAct { head: Linear, percentile: f64, clip: f64 },
    #[serde(rename = "RankFeat")]
    RankFeat { head: Linear },
    #[serde(rename = "DICE")]
    Dice { masked_head: Linear, sparsity: f64 },
    #[serde(rename = "ASH")]
    Ash { head: Linear, percentile: f64 },
    #[serde(rename = "MDS")]
    Mds { stats: GaussianStats },
    #[serde(rename = "MDSEnsemble")]
    MdsEnsemble { layers: Vec<GaussianStats>, weights: Vec<f64> },
    #[serde(rename = "RMDS")]
    Rmds { stats: GaussianStats },
    #[serde(rename = "KLM")]
    Klm { templates: Array2<f64> },
    #[serde(rename = "OpenMax")]
    OpenMax(OpenMaxState),
    #[serde(rename = "SHE")]
    She { means: Array2<f64> },
    #[serde(rename = "GRAM")]
    Gram(GramState),
    #[serde(rename = "KNN")]
    Knn { reference: Array2<f64>, k: usize },
    #[serde(rename = "VIM")]
    Vim { subspace: VimSubspace, alpha: f64 },
    #[serde(rename = "GradNorm")]
    GradNorm { temperature: f64 },
}

/// Picks the candidate with the highest validation AUROC; only a strict
/// improvement displaces an earlier candidate.
fn select_best<P: Copy>(candidates: &[P], mut eval: impl FnMut(P) -> Result<(Vec<f64>, Vec<f64>)>) -> Result<P> {
    let mut best: Option<(P, f64)> = None;
    for &c in candidates {
        let (id, ood) = eval(c)?;
        let a = auroc(&id, &ood)?;
        log::trace!("tuning candidate auroc {a}");
        if best.as_ref().is_none_or(|(_, b)| a > *b) {
            best = Some((c, a));
        }
    }
    best.map(|(c, _)| c).ok_or_else(|| DetectorError::Invalid("empty tuning grid".into()))
}

fn should_tune(ctx: &FitContext, cfg: &DetectorConfig, fixed: bool) -> bool {
    !fixed && cfg.tune.unwrap_or(true) && ctx.ood_val.is_some()
}

fn layer_views(set: &FeatureSet) -> Vec<ArrayView2<'_, f64>> {
    set.layers.iter().map(|a| a.view()).collect()
}

fn check_width(set: &FeatureSet, d: usize, what: &str) -> Result<()> {
    if set.features.ncols() != d {
        return Err(DetectorError::Invalid(format!("{what}: feature width {} != {d}", set.features.ncols())));
    }
    Ok(())
}

/// Fits `method` on the context.
pub fn fit(method: Method, ctx: &FitContext, cfg: &DetectorConfig) -> Result<DetectorState> {
    ctx.id_train.validate()?;
    ctx.id_val.validate()?;
    if let Some(o) = ctx.ood_val {
        o.validate()?;
    }
    let classes = ctx.id_train.num_classes();
    Ok(match method {
        Method::Msp => DetectorState::Msp,
        Method::Mls => DetectorState::Mls,
        Method::Ebo => DetectorState::Ebo { temperature: cfg.temperature.unwrap_or(1.0) },
        Method::GradNorm => DetectorState::GradNorm { temperature: cfg.temperature.unwrap_or(1.0) },
        Method::Gen => DetectorState::Gen { gamma: cfg.gamma.unwrap_or(GEN_GAMMA), top_m: cfg.top_m.unwrap_or(classes.min(10)) },
        Method::TempScale => {
            let temperature = match cfg.temperature {
                Some(t) => t,
                None => fit_temperature(&ctx.id_val.logits, ctx.id_val.labels_or("validation labels")?),
            };
            DetectorState::TempScale { temperature }
        }
        Method::Odin | Method::OdinNoTemp | Method::OdinNoPert => fit_odin(method, ctx, cfg)?,
        Method::ReAct => {
            let head = ctx.head()?;
            let values: Vec<f64> = ctx.id_train.features.iter().copied().collect();
            let clip_at = |p: f64| percentile(&values, p);
            let percentile = match cfg.percentile {
                Some(p) => p,
                None if should_tune(ctx, cfg, false) => {
                    let ood = ctx.ood_val()?;
                    select_best(&REACT_GRID, |p| {
                        let c = clip_at(p)?;
                        Ok((
                            head_energy(&head, react_features(ctx.id_val.features.view(), c).view()),
                            head_energy(&head, react_features(ood.features.view(), c).view()),
                        ))
                    })?
                }
                None => REACT_PERCENTILE,
            };
            let clip = clip_at(percentile)?;
            DetectorState::ReAct { head, percentile, clip }
        }
        Method::RankFeat => DetectorState::RankFeat { head: ctx.head()? },
        Method::Dice => {
            let head = ctx.head()?;
            check_width(ctx.id_train, head.weight.ncols(), "DICE")?;
            let mean = ctx.id_train.features.mean_axis(Axis(0)).ok_or(DetectorError::Missing("training features"))?;
            let sparsity = match cfg.percentile {
                Some(p) => p,
                None if should_tune(ctx, cfg, false) => {
                    let ood = ctx.ood_val()?;
                    select_best(&DICE_GRID, |p| {
                        let masked = dice_head(&head, mean.view(), p);
                        Ok((head_energy(&masked, ctx.id_val.features.view()), head_energy(&masked, ood.features.view())))
                    })?
                }
                None => DICE_SPARSITY,
            };
            DetectorState::Dice { masked_head: dice_head(&head, mean.view(), sparsity), sparsity }
        }
        Method::Ash => {
            let head = ctx.head()?;
            let percentile = match cfg.percentile {
                Some(p) => p,
                None if should_tune(ctx, cfg, false) => {
                    let ood = ctx.ood_val()?;
                    select_best(&ASH_GRID, |p| {
                        Ok((
                            head_energy(&head, ash_features(ctx.id_val.features.view(), p).view()),
                            head_energy(&head, ash_features(ood.features.view(), p).view()),
                        ))
                    })?
                }
                None => ASH_PERCENTILE,
            };
            DetectorState::Ash { head, percentile }
        }
        Method::Mds | Method::Rmds => {
            let (set, labels) = ctx.class_set()?;
            let stats = fit_gaussian_stats(set.features.view(), labels, classes)?;
            if method == Method::Mds {
                DetectorState::Mds { stats }
            } else {
                DetectorState::Rmds { stats }
            }
        }
        Method::MdsEnsemble => {
            let (set, labels) = ctx.class_set()?;
            let ood = ctx.ood_val()?;
            let layers = set
                .layers
                .iter()
                .map(|a| fit_gaussian_stats(a.view(), labels, classes))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let per_layer = |s: &FeatureSet| -> Result<Array2<f64>> {
                if s.layers.len() != layers.len() {
                    return Err(DetectorError::Invalid(format!("expected {} layers, got {}", layers.len(), s.layers.len())));
                }
                let mut out = Array2::zeros((s.len(), layers.len()));
                for (l, (stats, a)) in layers.iter().zip(&s.layers).enumerate() {
                    for (i, row) in a.outer_iter().enumerate() {
                        out[[i, l]] = mds(stats, row);
                    }
                }
                Ok(out)
            };
            let id = per_layer(ctx.id_val)?;
            let od = per_layer(ood)?;
            let x = ndarray::concatenate(Axis(0), &[id.view(), od.view()]).expect("same width");
            let y: Vec<bool> = (0..x.nrows()).map(|i| i < id.nrows()).collect();
            DetectorState::MdsEnsemble { weights: logistic_weights(x.view(), &y), layers }
        }
        Method::Klm => {
            // grouped by predicted class, so no labels are involved
            let predicted = ctx.id_train.predictions();
            let probs = softmax_rows(&ctx.id_train.logits);
            let (templates, counts) = correct_class_means(probs.view(), &predicted, &predicted, classes);
            let mut templates = templates;
            for (mut row, &c) in templates.outer_iter_mut().zip(&counts) {
                if c == 0 {
                    row.fill(1.0 / classes as f64);
                }
            }
            DetectorState::Klm { templates }
        }
        Method::OpenMax => {
            let (set, labels) = ctx.class_set()?;
            DetectorState::OpenMax(OpenMaxState::fit(
                set.logits.view(),
                labels,
                cfg.alpha_rank.unwrap_or(classes.min(10)),
                cfg.tail_size.unwrap_or(OPENMAX_TAIL),
            ))
        }
        Method::She => {
            let (set, labels) = ctx.class_set()?;
            let (means, _) = correct_class_means(set.features.view(), labels, &set.predictions(), classes);
            DetectorState::She { means }
        }
        Method::Gram => {
            let (set, labels) = ctx.class_set()?;
            if ctx.id_val.layers.len() != set.layers.len() {
                return Err(DetectorError::Invalid("validation set has a different layer count".into()));
            }
            DetectorState::Gram(GramState::fit(
                &layer_views(set),
                labels,
                &layer_views(ctx.id_val),
                &ctx.id_val.predictions(),
                classes,
                cfg.gram_orders.unwrap_or(gram::DEFAULT_ORDERS),
                cfg.gram_bound_percentile,
            ))
        }
        Method::Knn => {
            if ctx.id_train.is_empty() {
                return Err(DetectorError::Missing("training features"));
            }
            let reference = l2_normalize(ctx.id_train.features.view());
            let k = cfg.k.unwrap_or(KNN_K).clamp(1, reference.nrows());
            DetectorState::Knn { reference, k }
        }
        Method::Vim => {
            let d = ctx.id_train.features.ncols();
            let subspace = VimSubspace::fit(ctx.id_train.features.view(), cfg.dim.unwrap_or(d / 2));
            let alpha = vim_alpha(&subspace, ctx.id_train.features.view(), ctx.id_train.logits.view());
            DetectorState::Vim { subspace, alpha }
        }
    })
}

fn fit_odin(method: Method, ctx: &FitContext, cfg: &DetectorConfig) -> Result<DetectorState> {
    let temps: Vec<f64> = match (method, cfg.temperature) {
        (_, Some(t)) => vec![t],
        (Method::OdinNoTemp, None) => vec![1.0],
        _ => TEMPERATURE_GRID.to_vec(),
    };
    let mags: Vec<f64> = match (method, cfg.magnitude) {
        (_, Some(m)) => vec![m],
        (Method::OdinNoPert, None) => vec![0.0],
        _ => MAGNITUDE_GRID.to_vec(),
    };
    let (temperature, magnitude) = if temps.len() == 1 && mags.len() == 1 {
        (temps[0], mags[0])
    } else {
        let ood = ctx.ood_val()?;
        let grid: Vec<(f64, f64)> = mags.iter().flat_map(|&m| temps.iter().map(move |&t| (t, m))).collect();
        select_best(&grid, |(t, m)| {
            Ok((
                odin_scores(ctx.model, ctx.id_val.inputs.as_ref().map(|x| x.view()), ctx.id_val.logits.view(), t, m)?,
                odin_scores(ctx.model, ood.inputs.as_ref().map(|x| x.view()), ood.logits.view(), t, m)?,
            ))
        })?
    };
    if magnitude != 0.0 && ctx.model.is_none() {
        return Err(DetectorError::Missing("model"));
    }
    Ok(DetectorState::Odin { variant: method, temperature, magnitude })
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let p = logit::softmax_unchecked(row.as_slice().expect("contiguous"), 1.0);
        row.assign(&Array1::from(p));
    }
    out
}

fn row_scores(m: &Array2<f64>, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    m.outer_iter().map(|r| f(r.as_slice().expect("contiguous row"))).collect()
}

impl DetectorState {
    pub fn method(&self) -> Method {
        match self {
            DetectorState::Msp => Method::Msp,
            DetectorState::TempScale { .. } => Method::TempScale,
            DetectorState::Odin { variant, .. } => *variant,
            DetectorState::Gen { .. } => Method::Gen,
            DetectorState::Mls => Method::Mls,
            DetectorState::Ebo { .. } => Method::Ebo,
            DetectorState::ReAct { .. } => Method::ReAct,
            DetectorState::RankFeat { .. } => Method::RankFeat,
            DetectorState::Dice { .. } => Method::Dice,
            DetectorState::Ash { .. } => Method::Ash,
            DetectorState::Mds { .. } => Method::Mds,
            DetectorState::MdsEnsemble { .. } => Method::MdsEnsemble,
            DetectorState::Rmds { .. } => Method::Rmds,
            DetectorState::Klm { .. } => Method::Klm,
            DetectorState::OpenMax(_) => Method::OpenMax,
            DetectorState::She { .. } => Method::She,
            DetectorState::Gram(_) => Method::Gram,
            DetectorState::Knn { .. } => Method::Knn,
            DetectorState::Vim { .. } => Method::Vim,
            DetectorState::GradNorm { .. } => Method::GradNorm,
        }
    }

    /// Scalar hyperparameters, for run reports.
    pub fn hyperparameters(&self) -> BTreeMap<&'static str, f64> {
        let mut h = BTreeMap::new();
        match self {
            DetectorState::TempScale { temperature } | DetectorState::Ebo { temperature } | DetectorState::GradNorm { temperature } => {
                h.insert("temperature", *temperature);
            }
            DetectorState::Odin { temperature, magnitude, .. } => {
                h.insert("temperature", *temperature);
                h.insert("magnitude", *magnitude);
            }
            DetectorState::Gen { gamma, top_m } => {
                h.insert("gamma", *gamma);
                h.insert("top_m", *top_m as f64);
            }
            DetectorState::ReAct { percentile, clip, .. } => {
                h.insert("percentile", *percentile);
                h.insert("clip", *clip);
            }
            DetectorState::Dice { sparsity, .. } => {
                h.insert("sparsity", *sparsity);
            }
            DetectorState::Ash { percentile, .. } => {
                h.insert("percentile", *percentile);
            }
            DetectorState::MdsEnsemble { weights, .. } => {
                for (i, w) in weights.iter().enumerate().take(8) {
                    h.insert(["weight0", "weight1", "weight2", "weight3", "weight4", "weight5", "weight6", "weight7"][i], *w);
                }
            }
            DetectorState::OpenMax(s) => {
                h.insert("alpha_rank", s.alpha_rank as f64);
                h.insert("tail_size", s.tail_size as f64);
            }
            DetectorState::Gram(g) => {
                h.insert("orders", g.orders as f64);
                if let Some(q) = g.bound_percentile {
                    h.insert("bound_percentile", q);
                }
            }
            DetectorState::Knn { k, .. } => {
                h.insert("k", *k as f64);
            }
            DetectorState::Vim { subspace, alpha } => {
                h.insert("dim", subspace.dim as f64);
                h.insert("alpha", *alpha);
            }
            DetectorState::Msp
            | DetectorState::Mls
            | DetectorState::RankFeat { .. }
            | DetectorState::Mds { .. }
            | DetectorState::Rmds { .. }
            | DetectorState::Klm { .. }
            | DetectorState::She { .. } => {}
        }
        h
    }

    /// One score per sample, higher meaning more in-distribution. Only ODIN
    /// with a non-zero magnitude needs the model.
    pub fn score(&self, data: &FeatureSet, model: Option<&ClassifierModel>) -> Result<Vec<f64>> {
        data.validate()?;
        let feats = data.features.view();
        Ok(match self {
            DetectorState::Msp => row_scores(&data.logits, |z| msp(z, 1.0)),
            DetectorState::TempScale { temperature } => row_scores(&data.logits, |z| msp(z, *temperature)),
            DetectorState::Odin { temperature, magnitude, .. } => {
                odin_scores(model, data.inputs.as_ref().map(|x| x.view()), data.logits.view(), *temperature, *magnitude)?
            }
            DetectorState::Gen { gamma, top_m } => row_scores(&data.logits, |z| gen_score(z, *gamma, *top_m)),
            DetectorState::Mls => row_scores(&data.logits, mls),
            DetectorState::Ebo { temperature } => row_scores(&data.logits, |z| energy(z, *temperature)),
            DetectorState::GradNorm { temperature } => data
                .features
                .outer_iter()
                .zip(data.logits.outer_iter())
                .map(|(f, z)| gradnorm(f, z.as_slice().expect("contiguous"), *temperature))
                .collect(),
            DetectorState::ReAct { head, clip, .. } => {
                check_width(data, head.weight.ncols(), "ReAct")?;
                head_energy(head, react_features(feats, *clip).view())
            }
            DetectorState::RankFeat { head } => {
                check_width(data, head.weight.ncols(), "RankFeat")?;
                head_energy(head, rankfeat_features(feats).view())
            }
            DetectorState::Dice { masked_head, .. } => {
                check_width(data, masked_head.weight.ncols(), "DICE")?;
                head_energy(masked_head, feats)
            }
            DetectorState::Ash { head, percentile } => {
                check_width(data, head.weight.ncols(), "ASH")?;
                head_energy(head, ash_features(feats, *percentile).view())
            }
            DetectorState::Mds { stats } => {
                check_width(data, stats.dim(), "MDS")?;
                feats.outer_iter().map(|f| mds(stats, f)).collect()
            }
            DetectorState::Rmds { stats } => {
                check_width(data, stats.dim(), "RMDS")?;
                feats.outer_iter().map(|f| rmds(stats, f)).collect()
            }
            DetectorState::MdsEnsemble { layers, weights } => {
                if data.layers.len() != layers.len() {
                    return Err(DetectorError::Invalid(format!("expected {} layers, got {}", layers.len(), data.layers.len())));
                }
                (0..data.len())
                    .map(|i| {
                        let rows: Vec<ArrayView1<f64>> = data.layers.iter().map(|a| a.row(i)).collect();
                        mds_ensemble(layers, weights, &rows)
                    })
                    .collect()
            }
            DetectorState::Klm { templates } => row_scores(&data.logits, |z| klm(z, templates)),
            DetectorState::OpenMax(state) => data.logits.outer_iter().map(|z| state.score(z)).collect(),
            DetectorState::She { means } => {
                check_width(data, means.ncols(), "SHE")?;
                feats.outer_iter().zip(data.predictions()).map(|(f, p)| she(f, means, p)).collect()
            }
            DetectorState::Gram(state) => {
                if data.layers.len() != state.layers.len() {
                    return Err(DetectorError::Invalid(format!("expected {} layers, got {}", state.layers.len(), data.layers.len())));
                }
                let predicted = data.predictions();
                (0..data.len())
                    .map(|i| {
                        let rows: Vec<ArrayView1<f64>> = data.layers.iter().map(|a| a.row(i)).collect();
                        state.score(&rows, predicted[i])
                    })
                    .collect()
            }
            DetectorState::Knn { reference, k } => {
                check_width(data, reference.ncols(), "KNN")?;
                knn_scores(reference, feats, *k)
            }
            DetectorState::Vim { subspace, alpha } => {
                check_width(data, subspace.center.len(), "VIM")?;
                feats
                    .outer_iter()
                    .zip(data.logits.outer_iter())
                    .map(|(f, z)| energy(z.as_slice().expect("contiguous"), 1.0) - alpha * subspace.residual_norm(f))
                    .collect()
            }
        })
    }
}

pub const STATE_FILE: &str = "detector.json";

/// Writes a fitted state as `detector.json` inside `dir`.
pub fn save_state(state: &DetectorState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DetectorError::State(e.to_string()))?;
    let text = serde_json::to_string(state).map_err(|e| DetectorError::State(e.to_string()))?;
    std::fs::write(dir.join(STATE_FILE), text).map_err(|e| DetectorError::State(e.to_string()))
}

pub fn load_state(dir: &Path) -> Result<DetectorState> {
    let text = std::fs::read_to_string(dir.join(STATE_FILE)).map_err(|e| DetectorError::State(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| DetectorError::State(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert_eq!(Method::benchmark_set().len(), 20);
        assert_eq!(Method::ALL.iter().filter(|m| m.uses_class_labels()).count(), 6);
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<DetectorConfig>(r#"{"k": 3}"#).is_ok());
        assert!(serde_json::from_str::<DetectorConfig>(r#"{"kk": 3}"#).is_err());
    }
}
