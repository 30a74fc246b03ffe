//! Post-hoc out-of-distribution detection for classifiers trained on noisy
//! labels: tensor bundles, a small MLP classifier, label-noise models,
//! detectors, metrics, synthetic data and a benchmark harness.

pub mod classifier;
pub mod detectors;
pub mod harness;
pub mod metrics;
pub mod noise;
pub mod numerics;
pub mod rng;
pub mod synth;
pub mod tensor_io;
