//! Declarative run-matrix configuration (TOML).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::detectors::{DetectorConfig, LabelSource, Method};
use crate::noise::{FlipCount, NoiseModel, TransitionMatrix};
use crate::synth::HypercubeConfig;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated Gaussian mixture; a classifier is trained per cell.
    Synthetic { name: String, hypercube: HypercubeConfig },
    /// A split directory of already-extracted outputs (`feat`, `logit`,
    /// `label`; optionally `head.W` / `head.b` in `train`). Training is
    /// skipped and the checkpoint axis collapses to `none`.
    Bundles { name: String, path: PathBuf },
}

impl DatasetSource {
    pub fn name(&self) -> &str {
        match self {
            DatasetSource::Synthetic { name, .. } | DatasetSource::Bundles { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseAxis {
    pub model: NoiseModel,
    /// Flip rates for `su`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rates: Vec<f64>,
    /// Transition matrix for `scc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionMatrix>,
    /// Tensor holding externally supplied labels for `real`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_key: Option<String>,
    #[serde(default, skip_serializing_if = "is_exact")]
    pub flip_count: FlipCount,
}

fn is_exact(f: &FlipCount) -> bool {
    *f == FlipCount::Exact
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    pub hidden_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingAxis {
    pub architectures: Vec<Architecture>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainingAxis {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.epochs, lr: self.lr, batch_size: self.batch_size, momentum: self.momentum }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoint {
    Early,
    Last,
    /// External bundles: there is no training run.
    None,
}

impl Checkpoint {
    pub fn name(&self) -> &'static str {
        match self {
            Checkpoint::Early => "early",
            Checkpoint::Last => "last",
            Checkpoint::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsoComparison {
    pub a: Method,
    pub b: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_model: Option<NoiseModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_source: Option<LabelSource>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_bootstrap")]
    pub n_bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_bootstrap() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMatrixConfig {
    pub name: String,
    pub datasets: Vec<DatasetSource>,
    pub noise: Vec<NoiseAxis>,
    pub training: TrainingAxis,
    pub checkpoints: Vec<Checkpoint>,
    pub label_sources: Vec<LabelSource>,
    pub detectors: Vec<Method>,
    /// Per-detector overrides keyed by method name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detector_params: BTreeMap<String, DetectorConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aso: Vec<AsoComparison>,
}

/// One point on the noise axis.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSetting {
    pub model: NoiseModel,
    /// Configured rate (SU), expected rate under balanced classes (SCC), or
    /// `None` for real labels, whose rate is measured.
    pub rate: Option<f64>,
    pub transition: Option<TransitionMatrix>,
    pub label_key: Option<String>,
    pub flip_count: FlipCount,
}

impl RunMatrixConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.datasets.is_empty() {
            return err("no datasets".into());
        }
        if self.noise.is_empty() {
            return err("no noise settings".into());
        }
        if self.training.architectures.is_empty() || self.training.seeds.is_empty() {
            return err("training needs at least one architecture and one seed".into());
        }
        if self.checkpoints.is_empty() || self.label_sources.is_empty() || self.detectors.is_empty() {
            return err("checkpoints, label_sources and detectors must be non-empty".into());
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 || !(self.training.lr > 0.0) {
            return err("training needs epochs > 0, batch_size > 0 and lr > 0".into());
        }
        for key in self.detector_params.keys() {
            key.parse::<Method>().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return err("dataset names must be unique".into());
        }
        for n in &self.noise {
            match n.model {
                NoiseModel::Su if n.rates.is_empty() => return err("su noise needs rates".into()),
                NoiseModel::Su if n.rates.iter().any(|r| !(0.0..=1.0).contains(r)) => return err("su rates must lie in [0, 1]".into()),
                NoiseModel::Scc if n.transition.is_none() => return err("scc noise needs a transition matrix".into()),
                NoiseModel::Real if n.label_key.is_none() => return err("real noise needs label_key".into()),
                _ => {}
            }
        }
        for a in &self.training.architectures {
            if a.hidden_dims.is_empty() || a.hidden_dims.contains(&0) {
                return err(format!("architecture `{}` needs non-zero hidden widths", a.name));
            }
        }
        Ok(())
    }

    pub fn noise_settings(&self) -> Vec<NoiseSetting> {
        let mut out = Vec::new();
        for n in &self.noise {
            let base = NoiseSetting { model: n.model, rate: None, transition: None, label_key: None, flip_count: n.flip_count };
            match n.model {
                NoiseModel::Su => {
                    out.extend(n.rates.iter().map(|&r| NoiseSetting { rate: Some(r), ..base.clone() }));
                }
                NoiseModel::Scc => {
                    let t = n.transition.clone().expect("validated");
                    let c = t.num_classes();
                    let rate = t.expected_rate(&vec![1.0 / c as f64; c]);
                    out.push(NoiseSetting { rate: Some(rate), transition: Some(t), ..base });
                }
                NoiseModel::Real => out.push(NoiseSetting { label_key: n.label_key.clone(), ..base }),
            }
        }
        out
    }

    pub fn detector_config(&self, method: Method) -> DetectorConfig {
        self.detector_params
            .iter()
            .find(|(k, _)| k.parse::<Method>().ok() == Some(method))
            .map(|(_, v)| v.clone())
            .unwrap_or_default()
    }
}
