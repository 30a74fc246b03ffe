mod common;

use ndarray::{Array1, Array2};
use noisyood::numerics::{
    fit_gaussian_stats, mahalanobis_sq, percentile, pseudo_inverse_sym, softmax, symmetric_eigen, top_singular_triplet,
};
use noisyood::rng::Stream;
use proptest::prelude::*;

use common::gaussian_matrix;

/// Gauss-Jordan inverse with partial pivoting.
fn gauss_jordan(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let p = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[[r, col]];
                for k in 0..n {
                    a[[r, k]] -= f * a[[col, k]];
                    inv[[r, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    inv
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_max_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[[i, j]].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).fold(f64::NEG_INFINITY, f64::max)
}

fn random_spd(rng: &mut Stream, d: usize) -> Array2<f64> {
    let a = gaussian_matrix(rng, d + 3, d, 1.0);
    a.t().dot(&a) / (d + 3) as f64 + Array2::<f64>::eye(d) * 0.1
}

#[test]
fn pseudo_inverse_matches_gauss_jordan_on_full_rank() {
    let mut rng = Stream::new(1, 0);
    for d in [1, 2, 5, 9] {
        let m = random_spd(&mut rng, d);
        let ours = pseudo_inverse_sym(&m);
        let oracle = gauss_jordan(&m);
        let err = (&ours - &oracle).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-8, "d={d}: {err}");
    }
}

#[test]
fn pseudo_inverse_penrose_conditions_on_singular() {
    let mut rng = Stream::new(2, 0);
    // rank 2 in 5 dimensions
    let b = gaussian_matrix(&mut rng, 5, 2, 1.0);
    let m = b.dot(&b.t());
    let p = pseudo_inverse_sym(&m);
    let close = |x: &Array2<f64>, y: &Array2<f64>| (x - y).iter().fold(0.0f64, |a, v| a.max(v.abs())) < 1e-8;
    assert!(close(&m.dot(&p).dot(&m), &m));
    assert!(close(&p.dot(&m).dot(&p), &p));
}

#[test]
fn symmetric_eigen_reconstructs_and_orders() {
    let mut rng = Stream::new(3, 0);
    let m = random_spd(&mut rng, 6);
    let (vals, vecs) = symmetric_eigen(&m);
    assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    let back = vecs.dot(&Array2::from_diag(&Array1::from(vals.clone()))).dot(&vecs.t());
    assert!((&back - &m).iter().all(|v| v.abs() < 1e-9));
    assert!((vals[0] - jacobi_max_eigenvalue(&m)).abs() < 1e-9);
}

#[test]
fn top_singular_value_matches_jacobi_on_gram_matrix() {
    let mut rng = Stream::new(4, 0);
    for (r, c) in [(3, 3), (4, 7), (8, 2), (6, 6)] {
        let a = gaussian_matrix(&mut rng, r, c, 1.0);
        let t = top_singular_triplet(a.view()).unwrap();
        let oracle = jacobi_max_eigenvalue(&a.t().dot(&a)).sqrt();
        assert!((t.sigma - oracle).abs() < 1e-7 * oracle.max(1.0), "{r}x{c}: {} vs {oracle}", t.sigma);
        // a v = sigma u
        let av = a.dot(&t.v);
        assert!((&av - &(&t.u * t.sigma)).iter().all(|x| x.abs() < 1e-6));
    }
}

#[test]
fn gaussian_stats_match_loops() {
    let mut rng = Stream::new(5, 0);
    let (n, d, c) = (60, 3, 3);
    let x = gaussian_matrix(&mut rng, n, d, 1.0);
    let y: Vec<usize> = (0..n).map(|i| i % c).collect();
    let stats = fit_gaussian_stats(x.view(), &y, c).unwrap();
    let mut means = vec![vec![0.0; d]; c];
    let mut counts = vec![0.0; c];
    for i in 0..n {
        counts[y[i]] += 1.0;
        for j in 0..d {
            means[y[i]][j] += x[[i, j]];
        }
    }
    for k in 0..c {
        for j in 0..d {
            means[k][j] /= counts[k];
            assert!((stats.means[[k, j]] - means[k][j]).abs() < 1e-12);
        }
    }
    let mut cov = Array2::<f64>::zeros((d, d));
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[[a, b]] += (x[[i, a]] - means[y[i]][a]) * (x[[i, b]] - means[y[i]][b]) / n as f64;
            }
        }
    }
    assert!((&stats.shared_covariance - &cov).iter().all(|v| v.abs() < 1e-12));
    let prec = gauss_jordan(&cov);
    let f = x.row(7);
    let manual: f64 = {
        let diff: Vec<f64> = (0..d).map(|j| f[j] - means[0][j]).collect();
        (0..d).flat_map(|a| (0..d).map(move |b| (a, b))).map(|(a, b)| diff[a] * prec[[a, b]] * diff[b]).sum()
    };
    let ours = mahalanobis_sq(f, stats.means.row(0), stats.precision.view()).unwrap();
    assert!((ours - manual).abs() < 1e-8 * manual.max(1.0));
}

/// Percentile by explicit rank interpolation between order statistics.
fn percentile_oracle(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p / 100.0;
    let below = v[h.floor() as usize];
    let above = v[(h.floor() as usize + 1).min(v.len() - 1)];
    below + (h - h.floor()) * (above - below)
}

proptest! {
    #[test]
    fn percentile_matches_order_statistics(values in proptest::collection::vec(-1e3f64..1e3, 1..60), p in 0.0f64..=100.0) {
        let ours = percentile(&values, p).unwrap();
        prop_assert!((ours - percentile_oracle(&values, p)).abs() <= 1e-9);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ours >= lo && ours <= hi);
    }

    #[test]
    fn softmax_matches_direct_exponentials(z in proptest::collection::vec(-20f64..20.0, 1..10), t in 0.1f64..10.0) {
        let p = softmax(&z, t).unwrap();
        let e: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            prop_assert!((a - b / s).abs() < 1e-12);
        }
    }
}
