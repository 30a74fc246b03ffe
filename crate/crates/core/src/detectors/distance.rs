//! Feature-space scores: Mahalanobis variants, KNN, VIM, SHE and OpenMax.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{softmax, symmetric_eigen, weibull_mle, GaussianStats, WeibullFit};

pub fn mds(stats: &GaussianStats, f: ArrayView1<f64>) -> f64 {
    -stats.class_distances(f).into_iter().fold(f64::INFINITY, f64::min)
}

pub fn rmds(stats: &GaussianStats, f: ArrayView1<f64>) -> f64 {
    let background = stats.background_distance(f);
    -stats.class_distances(f).into_iter().map(|d| d - background).fold(f64::INFINITY, f64::min)
}

/// Weighted sum of per-layer MDS scores.
pub fn mds_ensemble(layers: &[GaussianStats], weights: &[f64], rows: &[ArrayView1<f64>]) -> f64 {
    layers.iter().zip(weights).zip(rows).map(|((s, w), f)| w * mds(s, *f)).sum()
}

const LOGISTIC_RIDGE: f64 = 1e-3;
const LOGISTIC_MAX_ITERATIONS: usize = 100;

/// Logistic-regression slopes separating rows labelled `true` from rows
/// labelled `false`, fitted by Newton steps on standardized columns with a
/// small ridge penalty, then mapped back to the original column scale. The
/// intercept is dropped. Constant columns get weight 0.
pub fn logistic_weights(x: ArrayView2<f64>, y: &[bool]) -> Vec<f64> {
    let (n, k) = x.dim();
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(k));
    let std = x.var_axis(Axis(0), 0.0).mapv(f64::sqrt);
    let live: Vec<usize> = (0..k).filter(|&j| std[j] > 1e-12).collect();
    let p = live.len() + 1;
    // design matrix: intercept column then standardized live columns
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { (x[[i, live[j - 1]]] - mean[live[j - 1]]) / std[live[j - 1]] });
    let target = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
    let mut beta = DVector::zeros(p);
    for _ in 0..LOGISTIC_MAX_ITERATIONS {
        let eta = &design * &beta;
        let prob = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let mut grad = design.transpose() * (&target - &prob);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = prob[i] * (1.0 - prob[i]);
            let row = design.row(i);
            hess += w * row.transpose() * row;
        }
        for j in 1..p {
            grad[j] -= LOGISTIC_RIDGE * beta[j];
            hess[(j, j)] += LOGISTIC_RIDGE;
        }
        hess[(0, 0)] += 1e-12;
        let Some(step) = hess.lu().solve(&grad) else { break };
        beta += &step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    let mut weights = vec![0.0; k];
    for (j, &col) in live.iter().enumerate() {
        weights[col] = beta[j + 1] / std[col];
    }
    weights
}

/// Rows scaled to unit L2 norm; zero rows stay zero.
pub fn l2_normalize(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Negative distance from each normalized query to its `k`-th nearest
/// reference row, by exhaustive scan.
pub fn knn_scores(reference: &Array2<f64>, queries: ArrayView2<f64>, k: usize) -> Vec<f64> {
    let q = l2_normalize(queries);
    let k = k.clamp(1, reference.nrows());
    (0..q.nrows())
        .into_par_iter()
        .map(|i| {
            let x = q.row(i);
            let mut d2: Vec<f64> = reference
                .outer_iter()
                .map(|r| r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
            -kth.sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VimSubspace {
    pub center: Array1<f64>,
    /// Orthonormal basis of the complement of the principal subspace, d x (d - D).
    pub residual_basis: Array2<f64>,
    pub dim: usize,
}

impl VimSubspace {
    /// Principal subspace of the centred features with the top `dim`
    /// eigenvectors of their covariance.
    pub fn fit(features: ArrayView2<f64>, dim: usize) -> Self {
        let (n, d) = features.dim();
        let dim = dim.min(d);
        let center = features.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
        let centred = &features - &center;
        let cov = centred.t().dot(&centred) / n.max(1) as f64;
        let (_, vectors) = symmetric_eigen(&cov);
        let residual_basis = vectors.slice(ndarray::s![.., dim..]).to_owned();
        Self { center, residual_basis, dim }
    }

    pub fn residual_norm(&self, f: ArrayView1<f64>) -> f64 {
        let proj = self.residual_basis.t().dot(&(&f - &self.center));
        proj.dot(&proj).sqrt()
    }
}

/// `sum(max logit) / sum(residual norm)` over the fit set; 0 if every
/// residual vanishes.
pub fn vim_alpha(subspace: &VimSubspace, features: ArrayView2<f64>, logits: ArrayView2<f64>) -> f64 {
    let max_logit: f64 = logits.outer_iter().map(|z| z.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
    let residual: f64 = features.outer_iter().map(|f| subspace.residual_norm(f)).sum();
    if residual > 0.0 {
        max_logit / residual
    } else {
        0.0
    }
}

/// Per-class means over rows whose prediction matches their label; classes
/// without such rows get a zero vector.
pub fn correct_class_means(values: ArrayView2<f64>, labels: &[usize], predicted: &[usize], classes: usize) -> (Array2<f64>, Vec<usize>) {
    let mut sums = Array2::zeros((classes, values.ncols()));
    let mut counts = vec![0usize; classes];
    for ((row, &y), &p) in values.outer_iter().zip(labels).zip(predicted) {
        if y == p && y < classes {
            let mut s = sums.row_mut(y);
            s += &row;
            counts[y] += 1;
        }
    }
    for (mut row, &c) in sums.outer_iter_mut().zip(&counts) {
        if c > 0 {
            row /= c as f64;
        }
    }
    (sums, counts)
}

pub fn she(f: ArrayView1<f64>, means: &Array2<f64>, predicted: usize) -> f64 {
    f.dot(&means.row(predicted))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxState {
    /// Mean logit vector of correctly classified fit samples, per class.
    pub means: Array2<f64>,
    /// Tail fit of distances to the class mean; `None` for classes without
    /// usable samples, which are treated as always fully revised.
    pub fits: Vec<Option<WeibullFit>>,
    pub alpha_rank: usize,
    pub tail_size: usize,
}

impl OpenMaxState {
    pub fn fit(logits: ArrayView2<f64>, labels: &[usize], alpha_rank: usize, tail_size: usize) -> Self {
        let classes = logits.ncols();
        let predicted: Vec<usize> = logits.outer_iter().map(crate::classifier::argmax).collect();
        let (means, _) = correct_class_means(logits, labels, &predicted, classes);
        let mut distances = vec![Vec::new(); classes];
        for ((z, &y), &p) in logits.outer_iter().zip(labels).zip(&predicted) {
            if y == p {
                distances[y].push(euclidean(z, means.row(y)));
            }
        }
        let fits = distances
            .iter()
            .enumerate()
            .map(|(c, d)| {
                // samples sitting exactly on the mean carry no tail information
                let positive: Vec<f64> = d.iter().copied().filter(|&v| v > 0.0).collect();
                if positive.is_empty() {
                    return None;
                }
                match weibull_mle(&positive, tail_size.min(positive.len())) {
                    Ok(fit) => Some(fit),
                    Err(e) => {
                        log::debug!("openmax class {c}: {e}");
                        None
                    }
                }
            })
            .collect();
        Self { means, fits, alpha_rank: alpha_rank.min(classes), tail_size }
    }

    fn cdf(&self, class: usize, z: ArrayView1<f64>) -> f64 {
        match &self.fits[class] {
            Some(fit) => fit.cdf(euclidean(z, self.means.row(class))),
            None => 1.0,
        }
    }

    /// Revised logits followed by the synthetic unknown logit.
    pub fn revise(&self, z: ArrayView1<f64>) -> Vec<f64> {
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        let mut revised = z.to_vec();
        let mut unknown = 0.0;
        let alpha = self.alpha_rank as f64;
        for (rank, &c) in order.iter().take(self.alpha_rank).enumerate() {
            let weight = (alpha - rank as f64) / alpha;
            let w = weight * self.cdf(c, z);
            revised[c] = z[c] * (1.0 - w);
            unknown += z[c] - revised[c];
        }
        revised.push(unknown);
        revised
    }

    /// One minus the probability of the unknown class.
    pub fn score(&self, z: ArrayView1<f64>) -> f64 {
        let p = softmax(&self.revise(z), 1.0).expect("finite logits");
        1.0 - p[p.len() - 1]
    }
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fit_gaussian_stats;
    use ndarray::array;

    #[test]
    fn mds_one_dimensional() {
        let stats = GaussianStats {
            means: array![[0.0]],
            shared_covariance: array![[1.0]],
            precision: array![[1.0]],
            global_mean: array![0.0],
            global_precision: array![[1.0]],
        };
        assert_eq!(mds(&stats, array![2.0].view()), -4.0);
        assert_eq!(mds(&stats, array![0.0].view()), 0.0);
        assert_eq!(rmds(&stats, array![2.0].view()), 0.0);
    }

    #[test]
    fn rmds_hand_case() {
        // class means -1, 1 with unit tied variance; background mean 0, variance 4
        let stats = GaussianStats {
            means: array![[-1.0], [1.0]],
            shared_covariance: array![[1.0]],
            precision: array![[1.0]],
            global_mean: array![0.0],
            global_precision: array![[0.25]],
        };
        // f = 3: d = (16, 4), d0 = 9/4 -> -(4 - 2.25)
        assert!((rmds(&stats, array![3.0].view()) + 1.75).abs() < 1e-15);
    }

    #[test]
    fn knn_hand_geometry() {
        // unit-circle references at 0 and 90 degrees, query at 45 degrees
        let reference = array![[1.0, 0.0], [0.0, 1.0]];
        let s = knn_scores(&reference, array![[3.0, 3.0]].view(), 2);
        let expected = -(2.0 - 2f64.sqrt()).sqrt();
        assert!((s[0] - expected).abs() < 1e-12);
        assert_eq!(knn_scores(&reference, array![[5.0, 0.0]].view(), 1), vec![-0.0]);
    }

    #[test]
    fn vim_two_dimensional_projection() {
        // variance along (1, 1)/sqrt2 dominates
        let f = array![[1.0, 1.0], [-1.0, -1.0], [2.0, 2.1], [-2.0, -2.1]];
        let sub = VimSubspace::fit(f.view(), 1);
        let axis = sub.residual_basis.column(0).to_owned();
        assert!((axis[0].abs() - axis[1].abs()).abs() < 0.05);
        assert!(axis[0] * axis[1] < 0.0);
        let q = array![1.0, 0.0];
        let expected = (&q - &sub.center).dot(&axis).abs();
        assert!((sub.residual_norm(q.view()) - expected).abs() < 1e-12);
        let full = VimSubspace::fit(f.view(), 2);
        assert_eq!(full.residual_norm(q.view()), 0.0);
    }

    #[test]
    fn she_examples() {
        let means = array![[1.0, 2.0], [0.0, 0.0]];
        assert_eq!(she(array![1.0, 2.0].view(), &means, 0), 5.0);
        assert_eq!(she(array![2.0, -1.0].view(), &means, 0), 0.0);
    }

    #[test]
    fn openmax_at_class_mean_is_unrevised() {
        let logits = array![[3.0, 0.0], [3.2, 0.1], [2.8, -0.1], [0.0, 3.0], [0.1, 3.3], [-0.1, 2.7]];
        let labels = [0, 0, 0, 1, 1, 1];
        let state = OpenMaxState::fit(logits.view(), &labels, 2, 20);
        let m = state.means.row(0).to_owned();
        let revised = state.revise(m.view());
        assert_eq!(&revised[..2], m.as_slice().unwrap());
        assert_eq!(revised[2], 0.0);
        let expected = 1.0 - 1.0 / (1.0 + m.iter().map(|v| v.exp()).sum::<f64>());
        assert!((state.score(m.view()) - expected).abs() < 1e-12);
    }

    #[test]
    fn logistic_prefers_separating_column() {
        let x = array![[0.3, 1.0], [-0.2, 1.1], [0.1, 0.9], [0.25, -1.0], [-0.3, -1.2], [0.05, -0.8]];
        let y = [true, true, true, false, false, false];
        let w = logistic_weights(x.view(), &y);
        assert!(w[1] > 0.0 && w[1].abs() > w[0].abs());
    }

    #[test]
    fn duplicate_layers_scale_single_score() {
        let f = array![[0.0, 0.0], [1.0, 0.5], [0.2, 1.0], [3.0, 3.0], [3.5, 2.0], [2.5, 3.2]];
        let stats = fit_gaussian_stats(f.view(), &[0, 0, 0, 1, 1, 1], 2).unwrap();
        let q = array![1.0, 2.0];
        let single = mds(&stats, q.view());
        let both = mds_ensemble(&[stats.clone(), stats], &[0.3, 0.9], &[q.view(), q.view()]);
        assert!((both - 1.2 * single).abs() < 1e-12);
    }
}
