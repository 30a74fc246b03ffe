use noisyood::noise::{estimate_transition, inject_class_conditional, inject_uniform, TransitionMatrix};
use noisyood::rng::Stream;
use proptest::prelude::*;

fn random_labels(n: usize, c: usize, seed: u64) -> Vec<usize> {
    let mut rng = Stream::new(seed, 0);
    (0..n).map(|_| rng.below_usize(c)).collect()
}

fn random_stochastic(c: usize, seed: u64) -> TransitionMatrix {
    let mut rng = Stream::new(seed, 1);
    let rows = (0..c)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    TransitionMatrix::new(rows).unwrap()
}

/// Row frequencies by direct counting.
fn frequency_oracle(clean: &[usize], noisy: &[usize], c: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0usize; c]; c];
    for (&a, &b) in clean.iter().zip(noisy) {
        counts[a][b] += 1;
    }
    counts
        .into_iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.into_iter().map(|k| k as f64 / n as f64).collect()
        })
        .collect()
}

#[test]
fn class_conditional_frequencies_match_target_rows() {
    let (n, c) = (100_000, 4);
    let clean = random_labels(n, c, 11);
    let t = random_stochastic(c, 12);
    let noisy = inject_class_conditional(&clean, &t, 13).unwrap();
    let freq = frequency_oracle(&clean, &noisy, c);
    for (i, row) in freq.iter().enumerate() {
        let l1: f64 = row.iter().zip(t.row(i)).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 0.02, "row {i}: {l1}");
    }
}

#[test]
fn cyclic_permutation_shifts_every_label() {
    let c = 6;
    let clean = random_labels(500, c, 3);
    let rows = (0..c).map(|i| (0..c).map(|j| if j == (i + 1) % c { 1.0 } else { 0.0 }).collect()).collect();
    let noisy = inject_class_conditional(&clean, &TransitionMatrix::new(rows).unwrap(), 9).unwrap();
    assert!(clean.iter().zip(&noisy).all(|(a, b)| *b == (a + 1) % c));
    let (est, rate) = estimate_transition(&clean, &noisy, c).unwrap();
    assert_eq!(rate, 1.0);
    assert_eq!(est.row(2), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn absent_class_cannot_be_estimated() {
    assert!(estimate_transition(&[0, 0, 2], &[0, 2, 2], 3).is_err());
}

#[test]
fn same_seed_same_labels() {
    let clean = random_labels(2000, 5, 4);
    assert_eq!(inject_uniform(&clean, 5, 0.3, 8).unwrap(), inject_uniform(&clean, 5, 0.3, 8).unwrap());
    assert_ne!(inject_uniform(&clean, 5, 0.3, 8).unwrap(), inject_uniform(&clean, 5, 0.3, 9).unwrap());
}

proptest! {
    #[test]
    fn uniform_flips_exact_count(n in 1usize..400, c in 2usize..9, rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let clean = random_labels(n, c, seed ^ 0x55);
        let noisy = inject_uniform(&clean, c, rate, seed).unwrap();
        let flipped = clean.iter().zip(&noisy).filter(|(a, b)| a != b).count();
        prop_assert_eq!(flipped, (rate * n as f64).round() as usize);
        prop_assert!(noisy.iter().all(|&y| y < c));
    }

    #[test]
    fn estimate_is_row_stochastic_and_matches_counts(n in 20usize..300, c in 2usize..6, seed in any::<u64>()) {
        let mut clean = random_labels(n, c, seed);
        // make every class present
        for k in 0..c {
            clean[k] = k;
        }
        let noisy = random_labels(n, c, seed.wrapping_add(1));
        let (est, rate) = estimate_transition(&clean, &noisy, c).unwrap();
        let freq = frequency_oracle(&clean, &noisy, c);
        for i in 0..c {
            let s: f64 = est.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for j in 0..c {
                prop_assert!((est.row(i)[j] - freq[i][j]).abs() < 1e-12);
            }
        }
        let oracle = clean.iter().zip(&noisy).filter(|(a, b)| a != b).count() as f64 / n as f64;
        prop_assert!((rate - oracle).abs() < 1e-12);
    }

    #[test]
    fn identity_leaves_labels_alone(n in 1usize..300, c in 2usize..9, seed in any::<u64>()) {
        let clean = random_labels(n, c, seed);
        prop_assert_eq!(inject_class_conditional(&clean, &TransitionMatrix::identity(c), seed).unwrap(), clean);
    }
}
