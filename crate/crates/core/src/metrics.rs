//! AUROC and its correct/incorrect decomposition, aggregation across OOD
//! sets, Spearman correlation and the almost-stochastic-order test.
//!
//! Orientation is fixed throughout: ID samples are positives and a higher
//! detector score means "more in-distribution".

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng::{streams, Stream};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("{0} side is empty")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least {need} samples per side, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

type Result<T> = std::result::Result<T, MetricError>;

/// Mann-Whitney AUROC with ties counted one half, from a single sort.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(MetricError::Empty("positive"));
    }
    if neg.is_empty() {
        return Err(MetricError::Empty("negative"));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum of positives with midranks for tied blocks (ranks from 1)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let block_pos = all[i..=j].iter().filter(|e| e.1).count();
        rank_sum += mid * block_pos as f64;
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocTriple {
    pub id_vs_ood: f64,
    /// Absent when no ID sample was classified correctly.
    pub correct_vs_ood: Option<f64>,
    /// Absent when no ID sample was misclassified.
    pub incorrect_vs_ood: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub n_ood: usize,
}

pub fn auroc_triple(id_scores: &[f64], id_correct: &[bool], ood_scores: &[f64]) -> Result<AurocTriple> {
    if id_scores.len() != id_correct.len() {
        return Err(MetricError::Length(id_scores.len(), id_correct.len()));
    }
    let id_vs_ood = auroc(id_scores, ood_scores)?;
    let (mut correct, mut incorrect) = (Vec::new(), Vec::new());
    for (&s, &ok) in id_scores.iter().zip(id_correct) {
        if ok {
            correct.push(s);
        } else {
            incorrect.push(s);
        }
    }
    let part = |v: &[f64]| if v.is_empty() { Ok(None) } else { auroc(v, ood_scores).map(Some) };
    Ok(AurocTriple {
        id_vs_ood,
        correct_vs_ood: part(&correct)?,
        incorrect_vs_ood: part(&incorrect)?,
        n_correct: correct.len(),
        n_incorrect: incorrect.len(),
        n_ood: ood_scores.len(),
    })
}

/// Median; an even count averages the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricError::Empty("input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricError::Empty("input"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Fractional ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: x.len() });
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Parameter("constant input has no correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::Length(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsoResult {
    pub eps_min: f64,
    pub alpha: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl AsoResult {
    /// A is declared stochastically better than B.
    pub fn a_better(&self) -> bool {
        self.eps_min < 0.5
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AsoConfig {
    pub alpha: f64,
    pub n_bootstrap: usize,
    /// Quantile grid spacing for the violation-ratio integral.
    pub dt: f64,
    pub seed: u64,
}

impl Default for AsoConfig {
    fn default() -> Self {
        Self { alpha: 0.05, n_bootstrap: 1000, dt: 0.005, seed: 0 }
    }
}

pub const ASO_MIN_SAMPLES: usize = 5;

/// Empirical quantile function (left-continuous step) of sorted data.
fn quantile(sorted: &[f64], t: f64) -> f64 {
    let n = sorted.len();
    let idx = ((t * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Share of the squared quantile gap where B lies above A, integrated on a
/// midpoint grid. Zero when A dominates everywhere, one when B does, and
/// one half when the two quantile functions coincide.
pub fn violation_ratio(a: &[f64], b: &[f64], dt: f64) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    violation_ratio_sorted(&sa, &sb, dt)
}

fn violation_ratio_sorted(sa: &[f64], sb: &[f64], dt: f64) -> f64 {
    let steps = (1.0 / dt).round() as usize;
    let (mut violation, mut total) = (0.0, 0.0);
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let diff = quantile(sa, t) - quantile(sb, t);
        let sq = diff * diff;
        total += sq;
        if diff < 0.0 {
            violation += sq;
        }
    }
    if total == 0.0 {
        0.5
    } else {
        violation / total
    }
}

/// Almost-stochastic-order test of "A better than B" on per-seed scores.
/// `eps_min` is a `1 - alpha` upper confidence bound on the violation ratio,
/// with its spread estimated from `n_bootstrap` paired resamples.
pub fn aso(a: &[f64], b: &[f64], cfg: AsoConfig) -> Result<AsoResult> {
    let got = a.len().min(b.len());
    if got < ASO_MIN_SAMPLES {
        return Err(MetricError::TooFew { need: ASO_MIN_SAMPLES, got });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(MetricError::Parameter(format!("alpha {} outside (0, 1)", cfg.alpha)));
    }
    if cfg.n_bootstrap < 2 || !(cfg.dt > 0.0 && cfg.dt <= 0.5) {
        return Err(MetricError::Parameter("need n_bootstrap >= 2 and dt in (0, 0.5]".into()));
    }
    let eps_hat = violation_ratio(a, b, cfg.dt);
    let (n, m) = (a.len(), b.len());
    let replicates: Vec<f64> = (0..cfg.n_bootstrap as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = Stream::derive(cfg.seed, streams::BOOTSTRAP, r);
            let mut ra: Vec<f64> = (0..n).map(|_| a[rng.below_usize(n)]).collect();
            let mut rb: Vec<f64> = (0..m).map(|_| b[rng.below_usize(m)]).collect();
            ra.sort_by(f64::total_cmp);
            rb.sort_by(f64::total_cmp);
            violation_ratio_sorted(&ra, &rb, cfg.dt)
        })
        .collect();
    let scale = ((n * m) as f64 / (n + m) as f64).sqrt();
    let centred: Vec<f64> = replicates.iter().map(|e| scale * (e - eps_hat)).collect();
    let mu = centred.iter().sum::<f64>() / centred.len() as f64;
    let sigma = (centred.iter().map(|c| (c - mu).powi(2)).sum::<f64>() / centred.len() as f64).sqrt();
    let z = Normal::standard().inverse_cdf(1.0 - cfg.alpha);
    let eps_min = (eps_hat + sigma / scale * z).clamp(0.0, 1.0);
    Ok(AsoResult { eps_min, alpha: cfg.alpha, n_bootstrap: cfg.n_bootstrap, seed: cfg.seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_trivial_cases() {
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0; 3], &[1.0; 5]).unwrap(), 0.5);
        assert_eq!(auroc(&[], &[1.0]), Err(MetricError::Empty("positive")));
        assert_eq!(auroc(&[1.0], &[]), Err(MetricError::Empty("negative")));
    }

    #[test]
    fn triple_all_correct() {
        let t = auroc_triple(&[0.9, 0.8, 0.3], &[true; 3], &[0.1, 0.5]).unwrap();
        assert_eq!(t.incorrect_vs_ood, None);
        assert_eq!(t.correct_vs_ood, Some(t.id_vs_ood));
    }

    #[test]
    fn triple_constructed_ordering() {
        // correct ID >> OOD >> incorrect ID
        let id = [10.0, 11.0, 12.0, -10.0];
        let mask = [true, true, true, false];
        let t = auroc_triple(&id, &mask, &[0.0, 1.0]).unwrap();
        assert_eq!(t.correct_vs_ood, Some(1.0));
        assert_eq!(t.incorrect_vs_ood, Some(0.0));
        assert!((t.id_vs_ood - 0.75).abs() < 1e-12);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[0.8]).unwrap(), 0.8);
        assert_eq!(median(&[1.0, 0.6, 0.8]).unwrap(), 0.8);
        assert!((median(&[0.6, 0.8]).unwrap() - 0.7).abs() < 1e-15);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn spearman_monotone() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        let down: Vec<f64> = x.iter().map(|v| -v * v * v).collect();
        assert!((spearman(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn violation_ratio_extremes() {
        let a = [5.0, 6.0, 7.0, 8.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(violation_ratio(&a, &b, 0.01), 0.0);
        assert_eq!(violation_ratio(&b, &a, 0.01), 1.0);
        assert_eq!(violation_ratio(&a, &a, 0.01), 0.5);
    }

    #[test]
    fn aso_rejects_small_samples() {
        assert_eq!(
            aso(&[1.0; 4], &[1.0; 10], AsoConfig::default()),
            Err(MetricError::TooFew { need: 5, got: 4 })
        );
    }

    #[test]
    fn aso_deterministic_given_seed() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).cos()).collect();
        let cfg = AsoConfig { n_bootstrap: 200, seed: 4, ..AsoConfig::default() };
        assert_eq!(aso(&a, &b, cfg).unwrap(), aso(&a, &b, cfg).unwrap());
    }
}
