//! Activation and weight shaping in front of the output layer: ReAct, ASH-S,
//! DICE and RankFeat. Each reshapes the penultimate features (or the output
//! weights), recomputes the logits and returns their energy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::classifier::Linear;
use crate::numerics::{logsumexp_unchecked, top_singular_triplet};

/// Energy of `W f + b` for every row of `features`.
pub fn head_energy(head: &Linear, features: ArrayView2<f64>) -> Vec<f64> {
    head.apply(features)
        .outer_iter()
        .map(|z| logsumexp_unchecked(z.as_slice().expect("contiguous logits"), 1.0))
        .collect()
}

pub fn react_features(features: ArrayView2<f64>, clip: f64) -> Array2<f64> {
    features.mapv(|v| v.min(clip))
}

/// ASH-S on one feature vector: zero the `floor(p * d / 100)` smallest
/// entries and rescale the survivors so the sum is unchanged.
pub fn ash_s(f: ArrayView1<f64>, percentile: f64) -> Array1<f64> {
    let d = f.len();
    let prune = ((percentile * d as f64 / 100.0).floor() as usize).min(d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| f[a].total_cmp(&f[b]).then(a.cmp(&b)));
    let before: f64 = f.sum();
    let mut out = f.to_owned();
    for &i in &order[..prune] {
        out[i] = 0.0;
    }
    let after: f64 = out.sum();
    if prune > 0 && after != 0.0 {
        out *= before / after;
    }
    out
}

pub fn ash_features(features: ArrayView2<f64>, percentile: f64) -> Array2<f64> {
    let mut out = features.to_owned();
    for (mut row, f) in out.outer_iter_mut().zip(features.outer_iter()) {
        row.assign(&ash_s(f, percentile));
    }
    out
}

/// Number of weights DICE keeps per output row.
pub fn dice_keep(d: usize, sparsity: f64) -> usize {
    // the small slack keeps exact products such as 0.3 * 10 from rounding up
    ((100.0 - sparsity) * d as f64 / 100.0 - 1e-9).ceil().clamp(0.0, d as f64) as usize
}

/// Output layer with, per class, only the weights whose contribution
/// `W[c, j] * mean_feature[j]` ranks among the top [`dice_keep`] retained.
pub fn dice_head(head: &Linear, mean_feature: ArrayView1<f64>, sparsity: f64) -> Linear {
    let d = head.weight.ncols();
    let keep = dice_keep(d, sparsity);
    let mut weight = Array2::zeros(head.weight.raw_dim());
    for (c, w) in head.weight.outer_iter().enumerate() {
        let mut order: Vec<usize> = (0..d).collect();
        let contrib = |j: usize| w[j] * mean_feature[j];
        order.sort_by(|&a, &b| contrib(b).total_cmp(&contrib(a)).then(a.cmp(&b)));
        for &j in &order[..keep] {
            weight[[c, j]] = w[j];
        }
    }
    Linear { weight, bias: head.bias.clone() }
}

/// Rows of the matrix a `d`-vector is folded into: the largest divisor of
/// `d` not exceeding `sqrt(d)`.
pub fn fold_rows(d: usize) -> usize {
    (1..=d).take_while(|r| r * r <= d).filter(|r| d % r == 0).last().unwrap_or(1)
}

/// Folds `f` into an `r x (d / r)` matrix, removes its leading rank-one
/// component and flattens the result back.
pub fn rankfeat_residual(f: ArrayView1<f64>) -> Array1<f64> {
    let d = f.len();
    let r = fold_rows(d);
    let m = f.to_owned().into_shape_with_order((r, d / r)).expect("divisor shape");
    let triplet = match top_singular_triplet(m.view()) {
        Ok(t) => t,
        Err((e, last)) => {
            log::debug!("rankfeat power iteration: {e}; using last iterate");
            last
        }
    };
    let u = triplet.u.view().insert_axis(ndarray::Axis(1));
    let v = triplet.v.view().insert_axis(ndarray::Axis(0));
    let residual = &m - &(u.dot(&v) * triplet.sigma);
    residual.into_shape_with_order(d).expect("flatten")
}

pub fn rankfeat_features(features: ArrayView2<f64>) -> Array2<f64> {
    let mut out = features.to_owned();
    for (mut row, f) in out.outer_iter_mut().zip(features.outer_iter()) {
        row.assign(&rankfeat_residual(f));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn react_hand_case() {
        let head = Linear { weight: array![[1.0]], bias: array![0.0] };
        let clipped = react_features(array![[5.0]].view(), 2.0);
        assert_eq!(head_energy(&head, clipped.view()), vec![2.0]);
    }

    #[test]
    fn ash_hand_case() {
        let out = ash_s(array![4.0, 3.0, 2.0, 1.0].view(), 50.0);
        let expected = [40.0 / 7.0, 30.0 / 7.0, 0.0, 0.0];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(ash_s(array![4.0, 3.0, 2.0, 1.0].view(), 0.0), array![4.0, 3.0, 2.0, 1.0]);
        let pruned = ash_s(array![0.5, 0.1, 0.9, 0.3, 0.7].view(), 60.0);
        assert_eq!(pruned.iter().filter(|&&v| v == 0.0).count(), 3);
    }

    #[test]
    fn dice_counts_and_hand_case() {
        let head = Linear { weight: array![[1.0, 3.0], [2.0, -1.0]], bias: array![0.0, 0.5] };
        // contributions with mean feature (1, 1): row 0 keeps w=3, row 1 keeps w=2
        let masked = dice_head(&head, array![1.0, 1.0].view(), 50.0);
        assert_eq!(masked.weight, array![[0.0, 3.0], [2.0, 0.0]]);
        let logits = masked.apply(array![[2.0, 1.0]].view());
        assert_eq!(logits, array![[3.0, 4.5]]);
        for p in [0.0, 10.0, 33.0, 70.0, 99.0, 100.0] {
            let masked = dice_head(&head, array![1.0, 2.0].view(), p);
            for row in masked.weight.outer_iter() {
                assert!(row.iter().filter(|&&v| v != 0.0).count() <= dice_keep(2, p));
            }
        }
        assert_eq!(dice_keep(10, 70.0), 3);
        assert_eq!(dice_keep(10, 0.0), 10);
    }

    #[test]
    fn fold_rows_examples() {
        assert_eq!(fold_rows(1), 1);
        assert_eq!(fold_rows(7), 1);
        assert_eq!(fold_rows(12), 3);
        assert_eq!(fold_rows(16), 4);
        assert_eq!(fold_rows(32), 4);
    }

    #[test]
    fn rankfeat_rank_one_vanishes() {
        // outer product (1, 2) x (1, -1, 3) folded row-major
        let f = array![1.0, -1.0, 3.0, 2.0, -2.0, 6.0];
        assert_eq!(fold_rows(6), 2);
        let res = rankfeat_residual(f.view());
        assert!(res.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rankfeat_shrinks_norm() {
        let f = array![1.0, 0.2, 3.0, -2.0, 0.5, 1.5, 0.1, 2.2, -0.7];
        let res = rankfeat_residual(f.view());
        assert!(res.dot(&res) < f.dot(&f));
    }
}
