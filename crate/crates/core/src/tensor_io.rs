//! Array types and the on-disk bundle format.
//!
//! A bundle is a directory holding `manifest.json` plus one raw payload file
//! per tensor. Payloads are little-endian, row-major and unpadded; the
//! manifest records key, dtype, shape, file name and the IEEE CRC32 of each
//! payload:
//!
//! ```json
//! { "name": "train",
//!   "tensors": [ { "key": "feat", "dtype": "float32", "shape": [2, 3],
//!                  "file": "feat.bin", "crc32": 4215202376 } ] }
//! ```
//!
//! An optional `"extensions"` object carries producer metadata (noise specs,
//! model specs) and is ignored by validation.
//!
//! Per-sample keys (`feat`, `logit`, `input`, `label`, `label.*`, `act.*`)
//! must share their leading dimension. Other keys, such as model weights
//! `layer.<i>.W`, are free-form.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

pub const FEAT: &str = "feat";
pub const LOGIT: &str = "logit";
pub const LABEL: &str = "label";
pub const INPUT: &str = "input";
pub const ACT_PREFIX: &str = "act.";
pub const NOISY_LABEL_PREFIX: &str = "label.noisy.";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("checksum mismatch for tensor `{key}`: manifest {expected:#010x}, payload {actual:#010x}")]
    Checksum { key: String, expected: u32, actual: u32 },
    #[error("tensor `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("tensor `{key}` contains a non-finite value at flat index {index}")]
    NonFinite { key: String, index: usize },
    #[error("bundle `{bundle}` has no tensor `{key}`")]
    Missing { bundle: String, key: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "int32")]
    I32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I32(_) => Dtype::I32,
        }
    }
}

/// Dense row-major array of `f32` or `i32`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Bit-level equality, so `NaN` payloads compare equal to themselves.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.to_le_bytes() == other.to_le_bytes()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, BundleError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(BundleError::Invalid {
                key: String::new(),
                message: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, BundleError> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn i32(shape: Vec<usize>, values: Vec<i32>) -> Result<Self, BundleError> {
        Self::new(shape, TensorData::I32(values))
    }

    /// Rounds an `f64` matrix to a 2-d `float32` tensor.
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let values = m.iter().map(|&v| v as f32).collect();
        Self { shape: vec![m.nrows(), m.ncols()], data: TensorData::F32(values) }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        let values = labels.iter().map(|&l| l as i32).collect();
        Self { shape: vec![labels.len()], data: TensorData::I32(values) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    /// Leading dimension, 0 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Views a float tensor of rank 1 or 2 as an `f64` matrix (rank 1 gives
    /// one column).
    pub fn to_matrix(&self) -> Option<Array2<f64>> {
        let values = self.as_f32()?;
        let (r, c) = match self.shape.as_slice() {
            [r] => (*r, 1),
            [r, c] => (*r, *c),
            _ => return None,
        };
        Array2::from_shape_vec((r, c), values.iter().map(|&v| v as f64).collect()).ok()
    }

    pub fn to_labels(&self) -> Option<Vec<usize>> {
        let values = self.as_i32()?;
        if self.shape.len() != 1 || values.iter().any(|&v| v < 0) {
            return None;
        }
        Some(values.iter().map(|&v| v as usize).collect())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<Self, BundleError> {
        if bytes.len() % 4 != 0 {
            return Err(BundleError::Invalid {
                key: String::new(),
                message: format!("payload of {} bytes is not a multiple of 4", bytes.len()),
            });
        }
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match dtype {
            Dtype::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            Dtype::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
        };
        Self::new(shape, data)
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.as_f32()?.iter().position(|v| !v.is_finite())
    }
}

fn is_per_sample_key(key: &str) -> bool {
    key == FEAT
        || key == LOGIT
        || key == INPUT
        || key == LABEL
        || key.starts_with("label.")
        || key.starts_with(ACT_PREFIX)
}

fn is_label_key(key: &str) -> bool {
    key == LABEL || key.starts_with("label.")
}

/// Named collection of tensors for one dataset split (or one model).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBundle {
    pub name: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub extensions: BTreeMap<String, serde_json::Value>,
}

impl TensorBundle {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), tensors: BTreeMap::new(), extensions: BTreeMap::new() }
    }

    pub fn with(mut self, key: impl Into<String>, tensor: Tensor) -> Self {
        self.insert(key, tensor);
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(key.into(), tensor);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn require(&self, key: &str) -> Result<&Tensor, BundleError> {
        self.get(key).ok_or_else(|| BundleError::Missing { bundle: self.name.clone(), key: key.to_string() })
    }

    pub fn matrix(&self, key: &str) -> Result<Array2<f64>, BundleError> {
        self.require(key)?.to_matrix().ok_or_else(|| BundleError::Invalid {
            key: key.to_string(),
            message: "expected a float32 tensor of rank 1 or 2".into(),
        })
    }

    pub fn labels(&self, key: &str) -> Result<Vec<usize>, BundleError> {
        self.require(key)?.to_labels().ok_or_else(|| BundleError::Invalid {
            key: key.to_string(),
            message: "expected a non-negative int32 vector".into(),
        })
    }

    /// Number of samples, taken from the per-sample tensors.
    pub fn len(&self) -> usize {
        self.tensors
            .iter()
            .find(|(k, _)| is_per_sample_key(k))
            .map(|(_, t)| t.rows())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of classes implied by the logit width, if logits are present.
    pub fn num_classes(&self) -> Option<usize> {
        self.get(LOGIT).and_then(|t| t.shape().get(1).copied())
    }

    /// Checks the shared-N, label-range and finiteness invariants.
    pub fn validate(&self) -> Result<(), BundleError> {
        let mut n: Option<(usize, &str)> = None;
        for (key, t) in &self.tensors {
            if key.is_empty() || key.contains(['/', '\\']) || key.starts_with('.') {
                return Err(BundleError::Invalid { key: key.clone(), message: "invalid tensor key".into() });
            }
            if let Some(index) = t.first_non_finite() {
                return Err(BundleError::NonFinite { key: key.clone(), index });
            }
            if !is_per_sample_key(key) {
                continue;
            }
            if t.shape().is_empty() {
                return Err(BundleError::Invalid { key: key.clone(), message: "per-sample tensor must have rank >= 1".into() });
            }
            match n {
                None => n = Some((t.rows(), key)),
                Some((rows, first)) if rows != t.rows() => {
                    return Err(BundleError::Invalid {
                        key: key.clone(),
                        message: format!("leading dimension {} differs from `{first}` ({rows})", t.rows()),
                    });
                }
                _ => {}
            }
            if is_label_key(key) {
                let values = t.as_i32().ok_or_else(|| BundleError::Invalid {
                    key: key.clone(),
                    message: "labels must be int32".into(),
                })?;
                if t.shape().len() != 1 {
                    return Err(BundleError::Invalid { key: key.clone(), message: "labels must be a vector".into() });
                }
                let bound = self.num_classes().map(|c| c as i32).unwrap_or(i32::MAX);
                if let Some(bad) = values.iter().find(|&&v| v < 0 || v >= bound) {
                    return Err(BundleError::Invalid {
                        key: key.clone(),
                        message: format!("label {bad} outside [0, {bound})"),
                    });
                }
            } else if t.dtype() != Dtype::F32 {
                return Err(BundleError::Invalid { key: key.clone(), message: "expected float32".into() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    key: String,
    dtype: Dtype,
    shape: Vec<usize>,
    file: String,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extensions: BTreeMap<String, serde_json::Value>,
}

pub fn write_bundle(bundle: &TensorBundle, dir: &Path) -> Result<(), BundleError> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(bundle.tensors.len());
    for (key, tensor) in &bundle.tensors {
        let bytes = tensor.to_le_bytes();
        let file = format!("{key}.bin");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            key: key.clone(),
            dtype: tensor.dtype(),
            shape: tensor.shape().to_vec(),
            file,
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest { name: bundle.name.clone(), tensors: entries, extensions: bundle.extensions.clone() };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn read_bundle(dir: &Path) -> Result<TensorBundle, BundleError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| BundleError::Manifest { path: path.clone(), message: e.to_string() })?;
    let mut bundle = TensorBundle::new(manifest.name);
    bundle.extensions = manifest.extensions;
    for entry in manifest.tensors {
        if entry.file.contains(['/', '\\']) {
            return Err(BundleError::Manifest { path, message: format!("file `{}` escapes the bundle", entry.file) });
        }
        let payload_path = dir.join(&entry.file);
        let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
        let actual = crc32fast::hash(&bytes);
        if actual != entry.crc32 {
            return Err(BundleError::Checksum { key: entry.key, expected: entry.crc32, actual });
        }
        let tensor = Tensor::from_le_bytes(entry.dtype, entry.shape, &bytes).map_err(|e| match e {
            BundleError::Invalid { message, .. } => BundleError::Invalid { key: entry.key.clone(), message },
            other => other,
        })?;
        if bundle.tensors.insert(entry.key.clone(), tensor).is_some() {
            return Err(BundleError::Invalid { key: entry.key, message: "duplicate key in manifest".into() });
        }
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Train/val/test splits plus named OOD sets for one ID dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub train: TensorBundle,
    pub val: TensorBundle,
    pub test: TensorBundle,
    /// Held-out OOD data used only for hyperparameter tuning.
    pub ood_val: Option<TensorBundle>,
    pub ood_sets: Vec<(String, TensorBundle)>,
}

impl SplitSet {
    pub fn validate(&self) -> Result<(), BundleError> {
        let width = |b: &TensorBundle| b.get(FEAT).and_then(|t| t.shape().get(1).copied());
        let d = width(&self.train);
        for b in [&self.val, &self.test].into_iter().chain(self.ood_val.iter()).chain(self.ood_sets.iter().map(|(_, b)| b)) {
            b.validate()?;
            if width(b) != d {
                return Err(BundleError::Invalid {
                    key: FEAT.into(),
                    message: format!("bundle `{}` has feature width {:?}, train has {d:?}", b.name, width(b)),
                });
            }
        }
        let c = self.train.num_classes();
        for b in [&self.val, &self.test] {
            if b.num_classes() != c {
                return Err(BundleError::Invalid {
                    key: LOGIT.into(),
                    message: format!("bundle `{}` has {:?} classes, train has {c:?}", b.name, b.num_classes()),
                });
            }
        }
        self.train.validate()
    }

    /// Logit width when present, otherwise one more than the largest label
    /// in any labelled split.
    pub fn num_classes(&self) -> Option<usize> {
        if let Some(c) = self.train.num_classes() {
            return Some(c);
        }
        [&self.train, &self.val, &self.test]
            .iter()
            .filter_map(|b| b.labels(LABEL).ok())
            .flat_map(|y| y.into_iter().max())
            .max()
            .map(|m| m + 1)
    }

    /// Writes `train/`, `val/`, `test/`, `ood_val/` and `ood/<name>/`.
    pub fn write(&self, dir: &Path) -> Result<(), BundleError> {
        self.validate()?;
        write_bundle(&self.train, &dir.join("train"))?;
        write_bundle(&self.val, &dir.join("val"))?;
        write_bundle(&self.test, &dir.join("test"))?;
        if let Some(b) = &self.ood_val {
            write_bundle(b, &dir.join("ood_val"))?;
        }
        for (name, b) in &self.ood_sets {
            write_bundle(b, &dir.join("ood").join(name))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, BundleError> {
        let ood_val_dir = dir.join("ood_val");
        let ood_val = if ood_val_dir.join(MANIFEST_FILE).exists() { Some(read_bundle(&ood_val_dir)?) } else { None };
        let mut ood_sets = Vec::new();
        let ood_root = dir.join("ood");
        if ood_root.exists() {
            let mut names: Vec<String> = fs::read_dir(&ood_root)
                .map_err(io_err(&ood_root))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().join(MANIFEST_FILE).exists())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            for name in names {
                let b = read_bundle(&ood_root.join(&name))?;
                ood_sets.push((name, b));
            }
        }
        let set = Self {
            train: read_bundle(&dir.join("train"))?,
            val: read_bundle(&dir.join("val"))?,
            test: read_bundle(&dir.join("test"))?,
            ood_val,
            ood_sets,
        };
        set.validate()?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_bundle() -> TensorBundle {
        TensorBundle::new("toy")
            .with(FEAT, Tensor::f32(vec![2, 3], vec![0.0, 1.5, -2.0, 3.25, 4.0, 5.0]).unwrap())
            .with(LOGIT, Tensor::f32(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .with(LABEL, Tensor::i32(vec![2], vec![0, 1]).unwrap())
    }

    #[test]
    fn zero_feature_payload_is_24_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let b = TensorBundle::new("z").with(FEAT, Tensor::f32(vec![2, 3], vec![0.0; 6]).unwrap());
        write_bundle(&b, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("feat.bin")).unwrap();
        assert_eq!(bytes, vec![0u8; 24]);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["tensors"][0]["shape"], serde_json::json!([2, 3]));
        assert_eq!(manifest["tensors"][0]["dtype"], "float32");
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample_bundle();
        write_bundle(&b, dir.path()).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample_bundle(), dir.path()).unwrap();
        let path = dir.path().join("feat.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(BundleError::Checksum { .. })));
    }

    #[test]
    fn ood_bundle_without_labels_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let b = TensorBundle::new("ood").with(FEAT, Tensor::f32(vec![1, 2], vec![1.0, 2.0]).unwrap());
        write_bundle(&b, dir.path()).unwrap();
        assert!(read_bundle(dir.path()).unwrap().get(LABEL).is_none());
    }

    #[test]
    fn nan_logits_rejected() {
        let mut b = sample_bundle();
        b.insert(LOGIT, Tensor::f32(vec![2, 2], vec![0.0, f32::NAN, 0.0, 0.0]).unwrap());
        assert!(matches!(b.validate(), Err(BundleError::NonFinite { ref key, index: 1 }) if key == LOGIT));
        // the reader rejects it too, even if a producer skipped validation
        let dir = tempfile::tempdir().unwrap();
        let bytes = b.get(LOGIT).unwrap().to_le_bytes();
        write_bundle(&sample_bundle(), dir.path()).unwrap();
        fs::write(dir.path().join("logit.bin"), &bytes).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let good = crc32fast::hash(&sample_bundle().get(LOGIT).unwrap().to_le_bytes());
        let text = text.replace(&good.to_string(), &crc32fast::hash(&bytes).to_string());
        fs::write(dir.path().join(MANIFEST_FILE), text).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(BundleError::NonFinite { .. })));
    }

    #[test]
    fn mismatched_leading_dimension_rejected() {
        let b = sample_bundle().with(LABEL, Tensor::i32(vec![3], vec![0, 1, 1]).unwrap());
        assert!(matches!(b.validate(), Err(BundleError::Invalid { ref key, .. }) if key == LABEL));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let b = sample_bundle().with(LABEL, Tensor::i32(vec![2], vec![0, 2]).unwrap());
        assert!(b.validate().is_err());
    }

    #[test]
    fn weight_tensors_are_exempt_from_shared_n() {
        let b = sample_bundle().with("layer.0.W", Tensor::f32(vec![4, 3], vec![0.0; 12]).unwrap());
        b.validate().unwrap();
    }

    #[test]
    fn shape_mismatch_on_construction() {
        assert!(Tensor::f32(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
