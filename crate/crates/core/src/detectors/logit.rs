//! Scores computed from the logit vector alone (plus the penultimate norm for
//! GradNorm).

use ndarray::{Array2, ArrayView1};

use crate::numerics::logsumexp_unchecked;

/// Softmax without input checks; callers validate once per batch.
pub(crate) fn softmax_unchecked(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| ((v - max) / t).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Largest softmax probability at temperature `t`.
pub fn msp(z: &[f64], t: f64) -> f64 {
    // exp(0) / sum, with the max term exactly 1
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| ((v - max) / t).exp()).sum();
    1.0 / sum
}

pub fn mls(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Negative free energy, `t * logsumexp(z / t)`.
pub fn energy(z: &[f64], t: f64) -> f64 {
    logsumexp_unchecked(z, t)
}

/// Generalized entropy over the `top_m` largest probabilities; 0 only for a
/// one-hot softmax.
pub fn gen_score(z: &[f64], gamma: f64, top_m: usize) -> f64 {
    let mut p = softmax_unchecked(z, 1.0);
    p.sort_by(|a, b| b.total_cmp(a));
    -p.iter().take(top_m).map(|&q| q.powf(gamma) * (1.0 - q).powf(gamma)).sum::<f64>()
}

pub const KL_FLOOR: f64 = 1e-12;

/// `KL(p || q)` with both arguments floored at [`KL_FLOOR`] inside the log.
pub fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()))
        .sum()
}

/// Negative smallest KL divergence from the softmax to any template row.
pub fn klm(z: &[f64], templates: &Array2<f64>) -> f64 {
    let p = softmax_unchecked(z, 1.0);
    let best = templates
        .outer_iter()
        .map(|t| kl_floored(&p, t.as_slice().expect("contiguous template")))
        .fold(f64::INFINITY, f64::min);
    -best
}

/// L1 norm of the last-layer weight gradient of the cross-entropy against a
/// uniform target, in closed form `||p - u||_1 * ||f||_1`.
pub fn gradnorm(f: ArrayView1<f64>, z: &[f64], t: f64) -> f64 {
    let p = softmax_unchecked(z, t);
    let u = 1.0 / p.len() as f64;
    let dp: f64 = p.iter().map(|q| (q - u).abs()).sum();
    dp * f.iter().map(|v| v.abs()).sum::<f64>()
}

/// Mean negative log-likelihood of `labels` under `softmax(z / t)`.
pub fn nll(logits: &Array2<f64>, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.outer_iter().zip(labels) {
        let z = row.as_slice().expect("contiguous logits");
        total += logsumexp_unchecked(z, t) / t - z[y] / t;
    }
    total / labels.len().max(1) as f64
}

pub const LOG_T_RANGE: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091);
pub const GOLDEN_TOLERANCE: f64 = 1e-4;

/// Temperature minimizing [`nll`] by golden-section search on `ln t` over
/// `[ln 0.01, ln 100]`. Never returns a fit worse than `t = 1`.
pub fn fit_temperature(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let f = |s: f64| nll(logits, labels, s.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let s = 0.5 * (a + b);
    if f(s) <= f(0.0) {
        s.exp()
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn msp_examples() {
        assert!((msp(&[0.0; 4], 1.0) - 0.25).abs() < 1e-15);
        assert!((msp(&[6f64.ln(), 0.0, 0.0], 1.0) - 0.75).abs() < 1e-15);
        assert!((msp(&[3.0, -1.0, 2.0, 0.5], 1e6) - 0.25).abs() < 1e-3);
    }

    #[test]
    fn gen_examples() {
        assert_eq!(gen_score(&[1e4, 0.0, 0.0], 0.1, 3), 0.0);
        let expected = -2.0 * 0.5f64.powf(0.2);
        assert!((gen_score(&[0.0, 0.0], 0.1, 2) - expected).abs() < 1e-12);
        assert!((expected + 1.7411).abs() < 1e-4);
        for c in 2..12 {
            let mut onehot = vec![0.0; c];
            onehot[0] = 1e4;
            assert!(gen_score(&onehot, 0.1, c.min(10)) > gen_score(&vec![0.0; c], 0.1, c.min(10)));
        }
    }

    #[test]
    fn mls_and_energy() {
        assert_eq!(mls(&[3.0, 1.0, 2.0]), 3.0);
        assert!((energy(&[0.0; 3], 1.0) - 3f64.ln()).abs() < 1e-15);
        let z = [0.3, -1.2, 2.5];
        assert!(energy(&z, 1.0) >= mls(&z));
        assert!((energy(&z, 1e-6) - mls(&z)).abs() <= 1e-4);
    }

    #[test]
    fn klm_examples() {
        let t = array![[0.25, 0.25, 0.25, 0.25]];
        // effectively one-hot softmax
        let s = klm(&[1e3, 0.0, 0.0, 0.0], &t);
        assert!((s + 4f64.ln()).abs() < 1e-9);
        let z = [0.2, -0.4, 1.0];
        let p = softmax_unchecked(&z, 1.0);
        let templates = Array2::from_shape_vec((1, 3), p).unwrap();
        assert!(klm(&z, &templates).abs() < 1e-15);
    }

    #[test]
    fn gradnorm_uniform_is_zero() {
        assert_eq!(gradnorm(array![1.0, -2.0].view(), &[0.7; 5], 1.0), 0.0);
        assert!(gradnorm(array![1.0, -2.0].view(), &[0.7, 0.1, 3.0], 1.0) >= 0.0);
    }

    #[test]
    fn temperature_fit_not_worse_than_one() {
        let logits = array![[2.0, 0.0], [0.0, 2.0], [2.0, 0.0], [0.0, 2.0]];
        let labels = [0, 1, 1, 0];
        let t = fit_temperature(&logits, &labels);
        assert!(nll(&logits, &labels, t) <= nll(&logits, &labels, 1.0) + 1e-9);
        assert!(t > 1.0);
    }
}
