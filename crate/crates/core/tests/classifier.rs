mod common;

use ndarray::Array2;
use noisyood::classifier::{self, input_gradient, load_model, save_model, GradientObjective, MlpSpec, TrainConfig};
use noisyood::rng::Stream;
use noisyood::tensor_io::{Tensor, TensorBundle, FEAT, LABEL};

use common::{gaussian_matrix, random_model};

fn blobs(seed: u64, n: usize) -> TensorBundle {
    let mut rng = Stream::new(seed, 0);
    let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut x = gaussian_matrix(&mut rng, n, 5, 0.4);
    for (i, &c) in y.iter().enumerate() {
        x[[i, c]] += 2.0;
    }
    TensorBundle::new("blobs").with(FEAT, Tensor::from_matrix(&x)).with(LABEL, Tensor::from_labels(&y))
}

fn spec() -> MlpSpec {
    MlpSpec { input_dim: 5, hidden_dims: vec![12, 8], num_classes: 3, seed: 4 }
}

fn config() -> TrainConfig {
    TrainConfig { epochs: 8, lr: 0.05, batch_size: 16, momentum: 0.9 }
}

#[test]
fn training_is_deterministic() {
    let (train, val) = (blobs(1, 300), blobs(2, 60));
    let a = classifier::train(&spec(), &train, &val, &config()).unwrap();
    let b = classifier::train(&spec(), &train, &val, &config()).unwrap();
    assert_eq!(a, b);
    let mut other = spec();
    other.seed = 5;
    assert_ne!(classifier::train(&other, &train, &val, &config()).unwrap().last.layers, a.last.layers);
}

#[test]
fn early_checkpoint_has_best_validation_accuracy() {
    let pair = classifier::train(&spec(), &blobs(1, 300), &blobs(2, 60), &config()).unwrap();
    let log = &pair.last.training_log;
    assert_eq!(log.len(), 8);
    let best = log.iter().map(|r| r.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let first_best = log.iter().position(|r| r.val_accuracy == best).unwrap() + 1;
    assert_eq!(pair.early.epoch, first_best);
    assert_eq!(pair.last.epoch, 8);
    assert!(best > 0.9, "separable blobs should be learned, got {best}");
}

#[test]
fn saved_checkpoint_reloads_bit_exact() {
    let pair = classifier::train(&spec(), &blobs(1, 200), &blobs(2, 40), &config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&pair.early, dir.path()).unwrap();
    let back = load_model(dir.path()).unwrap();
    let x = blobs(3, 30).matrix(FEAT).unwrap();
    let (l1, l2) = (pair.early.logits(x.view()).unwrap(), back.logits(x.view()).unwrap());
    assert!(l1.iter().zip(l2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn input_gradient_matches_finite_differences() {
    let model = random_model(4, &[10, 7], 4, 9);
    let mut rng = Stream::new(8, 0);
    let xs: Array2<f64> = gaussian_matrix(&mut rng, 10, 4, 1.0);
    let t = 1.7;
    let objective = |x: &[f64]| {
        let z = model.logits(Array2::from_shape_vec((1, 4), x.to_vec()).unwrap().view()).unwrap();
        let z: Vec<f64> = z.row(0).iter().map(|v| v / t).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m - (m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
    };
    for row in xs.outer_iter() {
        let g = input_gradient(&model, row, GradientObjective::LogMaxSoftmax { temperature: t }).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let (mut up, mut down) = (row.to_vec(), row.to_vec());
            up[j] += h;
            down[j] -= h;
            let fd = (objective(&up) - objective(&down)) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-5, "component {j}: {} vs {fd}", g[j]);
        }
    }
}

#[test]
fn bad_training_inputs_are_rejected() {
    let (train, val) = (blobs(1, 50), blobs(2, 10));
    let zero = TrainConfig { epochs: 0, ..config() };
    assert!(classifier::train(&spec(), &train, &val, &zero).is_err());
    let narrow = MlpSpec { num_classes: 2, ..spec() };
    assert!(classifier::train(&narrow, &train, &val, &config()).is_err());
}
