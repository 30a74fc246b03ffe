//! Gram-matrix deviation scores over hidden-layer activations.
//!
//! Each activation row of width `d` is folded into an `r x (d / r)` matrix
//! `A` (see [`fold_rows`]). For every order `p`, `G = (A^p)(A^p)^T` is taken
//! elementwise-power-wise, its entries are mapped through a signed `p`-th
//! root and summed along rows, giving `r` values per order. Fitted bounds
//! hold per-class minima and maxima of those values.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::activation::fold_rows;
use crate::numerics::percentile_sorted;

pub const DEFAULT_ORDERS: usize = 5;
const BOUND_FLOOR: f64 = 1e-6;

/// Gram statistics for one activation row: `orders * r` values, order-major.
pub fn gram_features(a: ArrayView1<f64>, orders: usize) -> Vec<f64> {
    let d = a.len();
    let r = fold_rows(d);
    let s = d / r;
    let mut out = Vec::with_capacity(orders * r);
    for p in 1..=orders {
        let powered: Vec<f64> = a.iter().map(|v| v.powi(p as i32)).collect();
        for i in 0..r {
            let row_i = &powered[i * s..(i + 1) * s];
            let mut total = 0.0;
            for j in 0..r {
                let row_j = &powered[j * s..(j + 1) * s];
                let g: f64 = row_i.iter().zip(row_j).map(|(x, y)| x * y).sum();
                total += g.signum() * g.abs().powf(1.0 / p as f64);
            }
            out.push(total);
        }
    }
    out
}

/// Deviation of `v` outside `[lo, hi]`, relative to the violated bound.
pub fn delta(lo: f64, hi: f64, v: f64) -> f64 {
    if v < lo {
        (lo - v) / lo.abs().max(BOUND_FLOOR)
    } else if v > hi {
        (v - hi) / hi.abs().max(BOUND_FLOOR)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    /// `(classes + 1) x features`; the final row pools every class and
    /// stands in for classes with no fit samples.
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
    pub present: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramState {
    pub orders: usize,
    pub layers: Vec<LayerBounds>,
    /// Mean validation deviation per layer.
    pub normalizers: Vec<f64>,
    /// Percentile bounds `(q, 100 - q)` instead of min/max when set.
    pub bound_percentile: Option<f64>,
}

fn layer_bounds(features: &[Vec<f64>], labels: &[usize], classes: usize, bound_percentile: Option<f64>) -> LayerBounds {
    let width = features.first().map_or(0, Vec::len);
    let mut lower = Array2::zeros((classes + 1, width));
    let mut upper = Array2::zeros((classes + 1, width));
    let mut present = vec![false; classes + 1];
    let groups: Vec<Vec<usize>> = (0..=classes)
        .map(|c| (0..features.len()).filter(|&i| c == classes || labels[i] == c).collect())
        .collect();
    for (c, idx) in groups.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        present[c] = true;
        for j in 0..width {
            let mut col: Vec<f64> = idx.iter().map(|&i| features[i][j]).collect();
            col.sort_by(f64::total_cmp);
            let (lo, hi) = match bound_percentile {
                Some(q) => (percentile_sorted(&col, q), percentile_sorted(&col, 100.0 - q)),
                None => (col[0], col[col.len() - 1]),
            };
            lower[[c, j]] = lo;
            upper[[c, j]] = hi;
        }
    }
    LayerBounds { lower, upper, present }
}

impl LayerBounds {
    pub fn deviation(&self, features: &[f64], predicted: usize) -> f64 {
        let row = if self.present.get(predicted).copied().unwrap_or(false) { predicted } else { self.present.len() - 1 };
        features.iter().enumerate().map(|(j, &v)| delta(self.lower[[row, j]], self.upper[[row, j]], v)).sum()
    }
}

impl GramState {
    /// Bounds from `(layers, labels)` of the fit set; normalizers from the
    /// validation layers and their predicted classes.
    pub fn fit(
        fit_layers: &[ArrayView2<f64>],
        labels: &[usize],
        val_layers: &[ArrayView2<f64>],
        val_predicted: &[usize],
        classes: usize,
        orders: usize,
        bound_percentile: Option<f64>,
    ) -> Self {
        let layers: Vec<LayerBounds> = fit_layers
            .iter()
            .map(|a| {
                let feats: Vec<Vec<f64>> = a.outer_iter().map(|row| gram_features(row, orders)).collect();
                layer_bounds(&feats, labels, classes, bound_percentile)
            })
            .collect();
        let normalizers = layers
            .iter()
            .zip(val_layers)
            .map(|(bounds, a)| {
                let devs: Vec<f64> = a
                    .outer_iter()
                    .zip(val_predicted)
                    .map(|(row, &p)| bounds.deviation(&gram_features(row, orders), p))
                    .collect();
                let mean = devs.iter().sum::<f64>() / devs.len().max(1) as f64;
                if mean > 1e-12 {
                    mean
                } else {
                    1.0
                }
            })
            .collect();
        Self { orders, layers, normalizers, bound_percentile }
    }

    /// Per-layer raw deviations of one sample.
    pub fn deviations(&self, rows: &[ArrayView1<f64>], predicted: usize) -> Vec<f64> {
        self.layers
            .iter()
            .zip(rows)
            .map(|(bounds, row)| bounds.deviation(&gram_features(*row, self.orders), predicted))
            .collect()
    }

    pub fn score(&self, rows: &[ArrayView1<f64>], predicted: usize) -> f64 {
        -self.deviations(rows, predicted).iter().zip(&self.normalizers).map(|(d, n)| d / n).sum::<f64>()
    }
}
