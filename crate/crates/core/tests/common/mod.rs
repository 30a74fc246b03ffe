//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use noisyood::classifier::{ClassifierModel, MlpSpec};
use noisyood::detectors::FeatureSet;
use noisyood::rng::Stream;

pub fn gaussian_matrix(rng: &mut Stream, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.normal())
}

pub fn random_model(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> ClassifierModel {
    ClassifierModel::init(MlpSpec { input_dim, hidden_dims: hidden.to_vec(), num_classes: classes, seed }).unwrap()
}

/// Runs `model` over `x`; labels default to the model's own predictions.
pub fn traced(model: &ClassifierModel, x: Array2<f64>, labels: Option<Vec<usize>>) -> FeatureSet {
    let trace = model.forward_trace(x.view()).unwrap();
    let mut set = FeatureSet::from_trace(trace, Some(x), None);
    set.labels = Some(labels.unwrap_or_else(|| set.predictions()));
    set
}

/// Same as [`traced`] but without labels, as for OOD data.
pub fn traced_unlabelled(model: &ClassifierModel, x: Array2<f64>) -> FeatureSet {
    let trace = model.forward_trace(x.view()).unwrap();
    FeatureSet::from_trace(trace, Some(x), None)
}

/// O(n*m) pairwise AUROC with ties counted as one half.
pub fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// L1 norm of the central-difference gradient of KL(u || softmax(W f + b))
/// with respect to `W`.
pub fn fd_gradnorm(w: &Array2<f64>, b: &[f64], f: &[f64], h: f64) -> f64 {
    let kl = |w: &Array2<f64>| {
        let z: Vec<f64> = (0..w.nrows()).map(|c| b[c] + (0..f.len()).map(|j| w[[c, j]] * f[j]).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let c = z.len() as f64;
        // sum_c u_c (ln u_c - ln p_c)
        z.iter().map(|v| (1.0 / c) * ((1.0 / c).ln() - (v - lse))).sum::<f64>()
    };
    let mut total = 0.0;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let mut up = w.clone();
            up[[i, j]] += h;
            let mut dn = w.clone();
            dn[[i, j]] -= h;
            total += ((kl(&up) - kl(&dn)) / (2.0 * h)).abs();
        }
    }
    total
}
