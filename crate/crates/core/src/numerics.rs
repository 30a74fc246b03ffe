//! Numerical kernels shared by the detectors and metrics.
//!
//! Everything here computes in `f64`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("non-finite input")]
    NonFinite,
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("class {0} has fewer than 2 samples")]
    EmptyClass(usize),
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("Weibull tail contains non-positive value {0}")]
    NonPositiveTail(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
}

type Result<T> = std::result::Result<T, NumericsError>;

fn check_finite(z: &[f64]) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::Temperature(t))
    }
}

/// Temperature softmax, computed with max subtraction.
pub fn softmax(z: &[f64], t: f64) -> Result<Vec<f64>> {
    check_finite(z)?;
    check_temperature(t)?;
    if z.is_empty() {
        return Err(NumericsError::Empty);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// `t * ln(sum(exp(z_i / t)))`.
pub fn logsumexp(z: &[f64], t: f64) -> Result<f64> {
    check_finite(z)?;
    check_temperature(t)?;
    if z.is_empty() {
        return Err(NumericsError::Empty);
    }
    Ok(logsumexp_unchecked(z, t))
}

pub(crate) fn logsumexp_unchecked(z: &[f64], t: f64) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| ((v - max) / t).exp()).sum();
    max + t * sum.ln()
}

/// Class-conditional Gaussians with a tied covariance, plus a class-agnostic
/// background Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub means: Array2<f64>,
    pub shared_covariance: Array2<f64>,
    pub precision: Array2<f64>,
    pub global_mean: Array1<f64>,
    pub global_precision: Array2<f64>,
}

impl GaussianStats {
    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Squared Mahalanobis distance to each class mean.
    pub fn class_distances(&self, f: ArrayView1<f64>) -> Vec<f64> {
        self.means.outer_iter().map(|mu| mahalanobis_sq_unchecked(f, mu, self.precision.view())).collect()
    }

    pub fn background_distance(&self, f: ArrayView1<f64>) -> f64 {
        mahalanobis_sq_unchecked(f, self.global_mean.view(), self.global_precision.view())
    }
}

/// Per-class means and the maximum-likelihood tied covariance (divisor `N`).
///
/// The precision matrices are eigen pseudo-inverses; eigenvalues at or below
/// `1e-10 * trace / d` are treated as zero.
pub fn fit_gaussian_stats(features: ArrayView2<f64>, labels: &[usize], num_classes: usize) -> Result<GaussianStats> {
    let (n, d) = features.dim();
    if labels.len() != n {
        return Err(NumericsError::Dimension(format!("{n} feature rows vs {} labels", labels.len())));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let mut counts = vec![0usize; num_classes];
    let mut means = Array2::<f64>::zeros((num_classes, d));
    for (row, &y) in features.outer_iter().zip(labels) {
        if y >= num_classes {
            return Err(NumericsError::Dimension(format!("label {y} >= {num_classes} classes")));
        }
        counts[y] += 1;
        let mut m = means.row_mut(y);
        m += &row;
    }
    if let Some(c) = counts.iter().position(|&k| k < 2) {
        return Err(NumericsError::EmptyClass(c));
    }
    for (mut m, &k) in means.outer_iter_mut().zip(&counts) {
        m /= k as f64;
    }
    let mut centered = features.to_owned();
    for (mut row, &y) in centered.outer_iter_mut().zip(labels) {
        row -= &means.row(y);
    }
    let shared_covariance = scatter(&centered, n);
    let global_mean = features.mean_axis(Axis(0)).expect("n >= 2");
    let mut globally_centered = features.to_owned();
    globally_centered -= &global_mean;
    let global_covariance = scatter(&globally_centered, n);
    Ok(GaussianStats {
        precision: pseudo_inverse_sym(&shared_covariance),
        global_precision: pseudo_inverse_sym(&global_covariance),
        means,
        shared_covariance,
        global_mean,
    })
}

/// `X^T X / n`, symmetrized.
pub(crate) fn scatter(centered: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut s = centered.t().dot(centered) / n as f64;
    symmetrize(&mut s);
    s
}

fn symmetrize(m: &mut Array2<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}

/// Eigenvalues (descending) and matching eigenvectors (as columns) of a
/// symmetric matrix.
pub fn symmetric_eigen(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = m.nrows();
    let dm = nalgebra::DMatrix::from_fn(d, d, |i, j| m[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Array2::from_shape_fn((d, d), |(i, j)| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Pseudo-inverse of a symmetric PSD matrix with eigenvalue floor
/// `1e-10 * trace / d`.
pub fn pseudo_inverse_sym(m: &Array2<f64>) -> Array2<f64> {
    let d = m.nrows();
    if d == 0 {
        return m.clone();
    }
    let trace: f64 = m.diag().sum();
    let floor = 1e-10 * trace / d as f64;
    let (values, vectors) = symmetric_eigen(m);
    let mut out = Array2::<f64>::zeros((d, d));
    for (k, &lambda) in values.iter().enumerate() {
        if lambda <= floor || lambda <= 0.0 {
            continue;
        }
        let v = vectors.column(k);
        for i in 0..d {
            let vi = v[i] / lambda;
            for j in 0..d {
                out[[i, j]] += vi * v[j];
            }
        }
    }
    symmetrize(&mut out);
    out
}

pub fn mahalanobis_sq(f: ArrayView1<f64>, mean: ArrayView1<f64>, precision: ArrayView2<f64>) -> Result<f64> {
    let d = f.len();
    if mean.len() != d || precision.dim() != (d, d) {
        return Err(NumericsError::Dimension(format!(
            "vector {d}, mean {}, precision {:?}",
            mean.len(),
            precision.dim()
        )));
    }
    Ok(mahalanobis_sq_unchecked(f, mean, precision))
}

pub(crate) fn mahalanobis_sq_unchecked(f: ArrayView1<f64>, mean: ArrayView1<f64>, precision: ArrayView2<f64>) -> f64 {
    let diff = &f - &mean;
    let v = diff.dot(&precision.dot(&diff));
    // Rounding can push a PSD quadratic form a hair below zero.
    v.max(0.0)
}

/// Linear-interpolation percentile over sorted values (inclusive endpoints).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(NumericsError::Empty);
    }
    check_finite(values)?;
    if !(0.0..=100.0).contains(&p) {
        return Err(NumericsError::Dimension(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 1000;

/// Largest singular value and vectors by power iteration on `M^T M`.
///
/// On non-convergence the error carries the last iterate, which callers that
/// only need an approximation may still use.
pub fn top_singular_triplet(m: ArrayView2<f64>) -> std::result::Result<SingularTriplet, (NumericsError, SingularTriplet)> {
    let (r, s) = m.dim();
    if r == 0 || s == 0 {
        let empty = SingularTriplet { sigma: 0.0, u: Array1::zeros(r), v: Array1::zeros(s) };
        return Err((NumericsError::Empty, empty));
    }
    let unit = |n: usize| {
        let mut e = Array1::zeros(n);
        e[0] = 1.0;
        e
    };
    // Start from the heaviest row: it lies in the row space, so it is only
    // zero when M is.
    let start = m
        .outer_iter()
        .max_by(|a, b| a.dot(a).total_cmp(&b.dot(b)))
        .map(|row| row.to_owned())
        .unwrap();
    let norm = start.dot(&start).sqrt();
    if norm == 0.0 {
        return Ok(SingularTriplet { sigma: 0.0, u: unit(r), v: unit(s) });
    }
    let gram = m.t().dot(&m);
    let mut v = start / norm;
    let mut converged = false;
    for _ in 0..POWER_MAX_ITERATIONS {
        let w = gram.dot(&v);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            converged = true;
            break;
        }
        let next = w / wn;
        let delta = (&next - &v).dot(&(&next - &v)).sqrt();
        v = next;
        if delta <= POWER_TOLERANCE {
            converged = true;
            break;
        }
    }
    let mv = m.dot(&v);
    let sigma = mv.dot(&mv).sqrt();
    let u = if sigma > 0.0 { mv / sigma } else { unit(r) };
    let triplet = SingularTriplet { sigma, u, v };
    if converged {
        Ok(triplet)
    } else {
        Err((NumericsError::NoConvergence { iterations: POWER_MAX_ITERATIONS }, triplet))
    }
}

/// Two-parameter Weibull (plus location shift) fitted to the upper tail of a
/// sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeibullFit {
    pub shape: f64,
    pub scale: f64,
    pub shift: f64,
    pub tail_size: usize,
}

/// Shape reported for a constant tail, where the likelihood has no maximum.
pub const WEIBULL_SHAPE_CAP: f64 = 1e4;
const WEIBULL_TOLERANCE: f64 = 1e-9;
const WEIBULL_MAX_ITERATIONS: usize = 200;

impl WeibullFit {
    pub fn cdf(&self, x: f64) -> f64 {
        let y = x - self.shift;
        if y <= 0.0 {
            return 0.0;
        }
        1.0 - (-(y / self.scale).powf(self.shape)).exp()
    }
}

/// Maximum-likelihood Weibull fit on the `tail_size` largest samples.
///
/// The shape solves the profile-likelihood equation
/// `1/k + mean(ln t) - sum(t^k ln t) / sum(t^k) = 0` by Newton steps kept
/// inside a sign-change bracket; the scale follows in closed form.
pub fn weibull_mle(samples: &[f64], tail_size: usize) -> Result<WeibullFit> {
    if tail_size == 0 || samples.len() < tail_size {
        return Err(NumericsError::TooFew { needed: tail_size.max(1), got: samples.len() });
    }
    check_finite(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tail = &sorted[..tail_size];
    if let Some(&bad) = tail.iter().find(|&&t| t <= 0.0) {
        return Err(NumericsError::NonPositiveTail(bad));
    }
    let max = tail[0];
    let min = tail[tail_size - 1];
    if (max - min) <= f64::EPSILON * max {
        return Ok(WeibullFit { shape: WEIBULL_SHAPE_CAP, scale: max, shift: 0.0, tail_size });
    }
    // Work with t / max so that t^k stays in (0, 1].
    let logs: Vec<f64> = tail.iter().map(|t| (t / max).ln()).collect();
    let n = tail_size as f64;
    let mean_log = logs.iter().sum::<f64>() / n;
    let profile = |k: f64| {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &logs {
            let w = (k * l).exp();
            s0 += w;
            s1 += w * l;
            s2 += w * l * l;
        }
        let g = 1.0 / k + mean_log - s1 / s0;
        let dg = -1.0 / (k * k) - (s2 * s0 - s1 * s1) / (s0 * s0);
        (g, dg)
    };
    // g decreases monotonically from +inf; bracket the root.
    let (mut lo, mut hi) = (1e-3, 1.0);
    while profile(hi).0 > 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e7 {
            return Ok(WeibullFit { shape: WEIBULL_SHAPE_CAP, scale: max, shift: 0.0, tail_size });
        }
    }
    while profile(lo).0 < 0.0 {
        lo *= 0.5;
        if lo < 1e-12 {
            return Err(NumericsError::NoConvergence { iterations: 0 });
        }
    }
    let mut k = 0.5 * (lo + hi);
    let mut converged = false;
    for _ in 0..WEIBULL_MAX_ITERATIONS {
        let (g, dg) = profile(k);
        if g > 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let mut next = k - g / dg;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let step = (next - k).abs();
        k = next;
        if step <= WEIBULL_TOLERANCE * k.max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence { iterations: WEIBULL_MAX_ITERATIONS });
    }
    let shape = k.min(WEIBULL_SHAPE_CAP);
    let mean_pow = logs.iter().map(|l| (shape * l).exp()).sum::<f64>() / n;
    let scale = max * mean_pow.powf(1.0 / shape);
    Ok(WeibullFit { shape, scale, shift: 0.0, tail_size })
}
