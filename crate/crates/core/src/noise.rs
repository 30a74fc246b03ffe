//! Label-noise models: uniform (SU), class-conditional (SCC) and externally
//! supplied real noise, plus transition-matrix estimation.

use serde::{Deserialize, Serialize};

use crate::rng::{streams, Stream};
use crate::tensor_io::{Tensor, TensorBundle, NOISY_LABEL_PREFIX};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NoiseError {
    #[error("noise rate {0} outside [0, 1]")]
    Rate(f64),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error("label {label} at index {index} outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },
    #[error("transition matrix is not row-stochastic: {0}")]
    NotStochastic(String),
    #[error("length mismatch: {0} clean vs {1} noisy labels")]
    Length(usize, usize),
    #[error("class {0} is absent from the clean labels")]
    AbsentClass(usize),
    #[error("noise spec incomplete: {0}")]
    Incomplete(String),
}

type Result<T> = std::result::Result<T, NoiseError>;

/// Row-stochastic `P(noisy = j | clean = i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for TransitionMatrix {
    type Error = NoiseError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<TransitionMatrix> for Vec<Vec<f64>> {
    fn from(t: TransitionMatrix) -> Self {
        t.rows
    }
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = rows.len();
        if c < 2 {
            return Err(NoiseError::Classes(c));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(NoiseError::NotStochastic(format!("row {i} has {} entries, expected {c}", row.len())));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(NoiseError::NotStochastic(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(NoiseError::NotStochastic(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn identity(c: usize) -> Self {
        Self { rows: (0..c).map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect() }
    }

    /// Symmetric uniform noise: `1 - rate` on the diagonal, the rest spread
    /// evenly over the other classes.
    pub fn uniform(c: usize, rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(NoiseError::Rate(rate));
        }
        let off = rate / (c as f64 - 1.0);
        Self::new((0..c).map(|i| (0..c).map(|j| if i == j { 1.0 - rate } else { off }).collect()).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Expected flip rate under the given clean-label class frequencies.
    pub fn expected_rate(&self, class_freq: &[f64]) -> f64 {
        class_freq.iter().zip(&self.rows).enumerate().map(|(i, (f, row))| f * (1.0 - row[i])).sum()
    }

    /// Largest per-row L1 distance to another matrix.
    pub fn max_row_l1(&self, other: &TransitionMatrix) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    /// Synthetic uniform (noisy completely at random).
    Su,
    /// Synthetic class-conditional (noisy at random).
    Scc,
    /// Externally supplied noisy labels, e.g. human re-annotations.
    Real,
}

impl NoiseModel {
    pub fn tag(&self) -> &'static str {
        match self {
            NoiseModel::Su => "su",
            NoiseModel::Scc => "scc",
            NoiseModel::Real => "real",
        }
    }
}

/// How SU picks the corrupted positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipCount {
    /// Exactly `round(rate * N)` positions.
    #[default]
    Exact,
    /// Each position independently with probability `rate`.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    #[serde(default)]
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_labels: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "is_default_flip")]
    pub flip_count: FlipCount,
}

fn is_default_flip(f: &FlipCount) -> bool {
    *f == FlipCount::Exact
}

impl NoiseSpec {
    pub fn uniform(rate: f64, seed: u64) -> Self {
        Self { model: NoiseModel::Su, rate, transition: None, noisy_labels: None, seed, flip_count: FlipCount::Exact }
    }

    pub fn class_conditional(transition: TransitionMatrix, seed: u64) -> Self {
        Self { model: NoiseModel::Scc, rate: 0.0, transition: Some(transition), noisy_labels: None, seed, flip_count: FlipCount::Exact }
    }

    pub fn real(noisy_labels: Vec<usize>) -> Self {
        Self { model: NoiseModel::Real, rate: 0.0, transition: None, noisy_labels: Some(noisy_labels), seed: 0, flip_count: FlipCount::Exact }
    }

    /// Short identifier such as `su_0.4`.
    pub fn tag(&self) -> String {
        match self.model {
            NoiseModel::Su => format!("su_{}", self.rate),
            NoiseModel::Scc => format!("scc_{}", self.rate),
            NoiseModel::Real => "real".to_string(),
        }
    }

    /// Produces the noisy training labels for `clean`.
    pub fn apply(&self, clean: &[usize], num_classes: usize) -> Result<Vec<usize>> {
        match self.model {
            NoiseModel::Su => match self.flip_count {
                FlipCount::Exact => inject_uniform(clean, num_classes, self.rate, self.seed),
                FlipCount::Bernoulli => inject_uniform_bernoulli(clean, num_classes, self.rate, self.seed),
            },
            NoiseModel::Scc => {
                let t = self.transition.as_ref().ok_or_else(|| NoiseError::Incomplete("SCC needs a transition matrix".into()))?;
                if t.num_classes() != num_classes {
                    return Err(NoiseError::Classes(t.num_classes()));
                }
                inject_class_conditional(clean, t, self.seed)
            }
            NoiseModel::Real => {
                let noisy = self.noisy_labels.as_ref().ok_or_else(|| NoiseError::Incomplete("REAL needs noisy labels".into()))?;
                if noisy.len() != clean.len() {
                    return Err(NoiseError::Length(clean.len(), noisy.len()));
                }
                check_labels(noisy, num_classes)?;
                Ok(noisy.clone())
            }
        }
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        Some((index, &label)) => Err(NoiseError::Label { index, label, classes }),
        None => Ok(()),
    }
}

fn check_rate(rate: f64, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(NoiseError::Classes(classes));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(NoiseError::Rate(rate));
    }
    Ok(())
}

/// Uniform draw from the `classes - 1` labels other than `label`.
fn other_class(rng: &mut Stream, label: usize, classes: usize) -> usize {
    let k = rng.below_usize(classes - 1);
    if k >= label {
        k + 1
    } else {
        k
    }
}

/// Flips exactly `round(rate * N)` positions, chosen uniformly without
/// replacement, each to a uniformly drawn different class.
pub fn inject_uniform(labels: &[usize], classes: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    check_rate(rate, classes)?;
    check_labels(labels, classes)?;
    let n = labels.len();
    let k = (rate * n as f64).round() as usize;
    let mut select = Stream::new(seed, streams::NOISE_SELECT);
    let mut replace = Stream::new(seed, streams::NOISE_REPLACE);
    let mut positions = select.sample_indices(n, k.min(n));
    positions.sort_unstable();
    let mut out = labels.to_vec();
    for i in positions {
        out[i] = other_class(&mut replace, labels[i], classes);
    }
    Ok(out)
}

/// Per-sample Bernoulli variant of [`inject_uniform`]; the realised rate
/// matches `rate` only in expectation.
pub fn inject_uniform_bernoulli(labels: &[usize], classes: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    check_rate(rate, classes)?;
    check_labels(labels, classes)?;
    let mut select = Stream::new(seed, streams::NOISE_SELECT);
    let mut replace = Stream::new(seed, streams::NOISE_REPLACE);
    Ok(labels
        .iter()
        .map(|&y| if select.uniform() < rate { other_class(&mut replace, y, classes) } else { y })
        .collect())
}

/// Samples each noisy label from the transition row of its clean label
/// (inverse CDF on one uniform draw per sample).
pub fn inject_class_conditional(labels: &[usize], transition: &TransitionMatrix, seed: u64) -> Result<Vec<usize>> {
    let classes = transition.num_classes();
    check_labels(labels, classes)?;
    let mut rng = Stream::new(seed, streams::NOISE_CLASS_CONDITIONAL);
    Ok(labels
        .iter()
        .map(|&y| {
            let u = rng.uniform();
            let row = transition.row(y);
            let mut acc = 0.0;
            let mut last_positive = y;
            for (j, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    last_positive = j;
                }
                acc += p;
                if u < acc && p > 0.0 {
                    return j;
                }
            }
            // u landed in the rounding gap above the cumulative sum
            last_positive
        })
        .collect())
}

/// Empirical transition matrix and overall flip rate.
pub fn estimate_transition(clean: &[usize], noisy: &[usize], classes: usize) -> Result<(TransitionMatrix, f64)> {
    if clean.len() != noisy.len() {
        return Err(NoiseError::Length(clean.len(), noisy.len()));
    }
    if classes < 2 {
        return Err(NoiseError::Classes(classes));
    }
    check_labels(clean, classes)?;
    check_labels(noisy, classes)?;
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&c, &y) in clean.iter().zip(noisy) {
        counts[c][y] += 1;
    }
    let mut rows = Vec::with_capacity(classes);
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(NoiseError::AbsentClass(i));
        }
        let mut probs: Vec<f64> = row.iter().map(|&k| k as f64 / total as f64).collect();
        // fold the rounding residue into the diagonal so rows sum to 1
        let residue = 1.0 - probs.iter().sum::<f64>();
        probs[i] += residue;
        rows.push(probs);
    }
    let flips = clean.iter().zip(noisy).filter(|(a, b)| a != b).count();
    let rate = if clean.is_empty() { 0.0 } else { flips as f64 / clean.len() as f64 };
    Ok((TransitionMatrix::new(rows)?, rate))
}

/// Stores noisy labels as `label.noisy.<tag>` and records the spec (without
/// any embedded label vector) under the `noise.<tag>` extension.
pub fn attach_noisy_labels(bundle: &mut TensorBundle, tag: &str, spec: &NoiseSpec, noisy: &[usize]) {
    bundle.insert(format!("{NOISY_LABEL_PREFIX}{tag}"), Tensor::from_labels(noisy));
    let mut recorded = spec.clone();
    recorded.noisy_labels = None;
    bundle
        .extensions
        .insert(format!("noise.{tag}"), serde_json::to_value(recorded).expect("noise spec serializes"));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    #[test]
    fn uniform_zero_and_one() {
        let y = labels(100, 4);
        assert_eq!(inject_uniform(&y, 4, 0.0, 3).unwrap(), y);
        let all = inject_uniform(&y, 4, 1.0, 3).unwrap();
        assert!(all.iter().zip(&y).all(|(a, b)| a != b));
    }

    #[test]
    fn uniform_exact_count() {
        let y = labels(10_000, 10);
        let noisy = inject_uniform(&y, 10, 0.4, 17).unwrap();
        assert_eq!(noisy.iter().zip(&y).filter(|(a, b)| a != b).count(), 4_000);
        assert!(noisy.iter().all(|&l| l < 10));
        assert_eq!(noisy, inject_uniform(&y, 10, 0.4, 17).unwrap());
        assert_ne!(noisy, inject_uniform(&y, 10, 0.4, 18).unwrap());
    }

    #[test]
    fn uniform_rejects_bad_rate() {
        assert_eq!(inject_uniform(&[0, 1], 2, 1.5, 0), Err(NoiseError::Rate(1.5)));
        assert_eq!(inject_uniform(&[0, 1], 2, -0.1, 0), Err(NoiseError::Rate(-0.1)));
    }

    #[test]
    fn bernoulli_variant_rate_in_expectation() {
        let y = labels(20_000, 5);
        let noisy = inject_uniform_bernoulli(&y, 5, 0.3, 1).unwrap();
        let flips = noisy.iter().zip(&y).filter(|(a, b)| a != b).count() as f64 / 20_000.0;
        assert!((flips - 0.3).abs() < 0.015);
    }

    #[test]
    fn class_conditional_identity_and_permutation() {
        let y = labels(50, 3);
        assert_eq!(inject_class_conditional(&y, &TransitionMatrix::identity(3), 1).unwrap(), y);
        let cyclic = TransitionMatrix::new(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let shifted = inject_class_conditional(&y, &cyclic, 1).unwrap();
        assert!(shifted.iter().zip(&y).all(|(&s, &c)| s == (c + 1) % 3));
    }

    #[test]
    fn non_stochastic_matrix_rejected() {
        assert!(TransitionMatrix::new(vec![vec![0.5, 0.4], vec![0.0, 1.0]]).is_err());
        assert!(TransitionMatrix::new(vec![vec![1.5, -0.5], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn estimate_hand_count() {
        let (t, rate) = estimate_transition(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(t.rows(), &[vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(rate, 0.25);
        let (t, rate) = estimate_transition(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(t, TransitionMatrix::identity(3));
        assert_eq!(rate, 0.0);
        assert_eq!(estimate_transition(&[0, 0], &[0, 1], 3), Err(NoiseError::AbsentClass(1)));
    }

    #[test]
    fn spec_apply_dispatches() {
        let y = labels(40, 4);
        let su = NoiseSpec::uniform(0.25, 2).apply(&y, 4).unwrap();
        assert_eq!(su.iter().zip(&y).filter(|(a, b)| a != b).count(), 10);
        assert!(NoiseSpec { transition: None, ..NoiseSpec::class_conditional(TransitionMatrix::identity(4), 0) }
            .apply(&y, 4)
            .is_err());
        assert!(NoiseSpec::real(vec![0; 3]).apply(&y, 4).is_err());
        assert_eq!(NoiseSpec::real(y.clone()).apply(&y, 4).unwrap(), y);
    }

    #[test]
    fn noise_spec_serializes_into_bundle() {
        let mut b = TensorBundle::new("train").with(crate::tensor_io::LABEL, Tensor::from_labels(&[0, 1]));
        attach_noisy_labels(&mut b, "su_0.5", &NoiseSpec::uniform(0.5, 1), &[1, 1]);
        b.validate().unwrap();
        let spec: NoiseSpec = serde_json::from_value(b.extensions["noise.su_0.5"].clone()).unwrap();
        assert_eq!(spec, NoiseSpec::uniform(0.5, 1));
    }
}
