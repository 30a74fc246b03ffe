mod common;

use noisyood::metrics::{aso, auroc, auroc_triple, spearman, violation_ratio, AsoConfig};
use noisyood::rng::Stream;
use proptest::prelude::*;

use common::pairwise_auroc;

/// Mid-ranks by counting, then Pearson on the ranks.
fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Violation ratio from quantiles read off by rank counting.
fn violation_oracle(a: &[f64], b: &[f64], steps: usize) -> f64 {
    let q = |v: &[f64], t: f64| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        // smallest x with F(x) >= t
        *s.iter().find(|x| s.iter().filter(|y| y <= x).count() as f64 / s.len() as f64 >= t - 1e-12).unwrap()
    };
    let (mut viol, mut total) = (0.0, 0.0);
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let d = q(a, t) - q(b, t);
        total += d * d;
        if d < 0.0 {
            viol += d * d;
        }
    }
    if total == 0.0 {
        0.5
    } else {
        viol / total
    }
}

#[test]
fn triple_splits_id_by_correctness() {
    let id = [0.9, 0.8, 0.2, 0.1];
    let correct = [true, true, false, false];
    let ood = [0.5, 0.15];
    let t = auroc_triple(&id, &correct, &ood).unwrap();
    assert_eq!(t.id_vs_ood, pairwise_auroc(&id, &ood));
    assert_eq!(t.correct_vs_ood, Some(1.0));
    assert_eq!(t.incorrect_vs_ood, Some(0.25));
}

#[test]
fn violation_ratio_matches_rank_oracle() {
    let mut rng = Stream::new(21, 0);
    for _ in 0..20 {
        let a: Vec<f64> = (0..1 + rng.below_usize(30)).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..1 + rng.below_usize(30)).map(|_| rng.normal() + 0.3).collect();
        let ours = violation_ratio(&a, &b, 0.005);
        assert!((ours - violation_oracle(&a, &b, 200)).abs() < 1e-12);
    }
}

#[test]
fn aso_bounded_and_ordered_by_shift() {
    let mut rng = Stream::new(22, 0);
    let base: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
    let mut last = -1.0;
    for shift in [2.0, 1.0, 0.0, -1.0, -2.0] {
        let a: Vec<f64> = base.iter().map(|v| v + shift).collect();
        let r = aso(&a, &base, AsoConfig { n_bootstrap: 300, ..AsoConfig::default() }).unwrap();
        assert!((0.0..=1.0).contains(&r.eps_min));
        assert!(r.eps_min >= last, "eps_min must not fall as A gets worse");
        last = r.eps_min;
    }
}

proptest! {
    #[test]
    fn auroc_matches_pairwise(pos in proptest::collection::vec(0u8..6, 1..40), neg in proptest::collection::vec(0u8..6, 1..40)) {
        // small integer scores force many ties
        let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
        let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
        prop_assert!((auroc(&p, &n).unwrap() - pairwise_auroc(&p, &n)).abs() < 1e-12);
    }

    #[test]
    fn auroc_complements_on_swap(pos in proptest::collection::vec(-5f64..5.0, 1..30), neg in proptest::collection::vec(-5f64..5.0, 1..30)) {
        let a = auroc(&pos, &neg).unwrap();
        let b = auroc(&neg, &pos).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_rank_oracle(pairs in proptest::collection::vec((0u8..8, -3f64..3.0), 3..40)) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let oracle = spearman_oracle(&x, &y);
        match spearman(&x, &y) {
            Ok(r) => prop_assert!((r - oracle).abs() < 1e-9, "{} vs {}", r, oracle),
            Err(_) => prop_assert!(!oracle.is_finite()),
        }
    }
}
