//! Small ReLU MLP classifiers with full introspection.
//!
//! The engine trains with minibatch SGD (momentum 0.9, constant learning
//! rate) on cross-entropy, keeps the best-validation and final checkpoints,
//! and exposes per-layer activations and exact input gradients for the
//! detectors that need model access.
//!
//! Checkpoint weights are rounded to `f32` when they are taken, so a model
//! written with [`save_model`] and read back with [`load_model`] is
//! bit-identical to the in-memory one.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::rng::{streams, Stream};
use crate::tensor_io::{self, BundleError, Tensor, TensorBundle, ACT_PREFIX, FEAT, INPUT, LABEL, LOGIT};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input width {got} does not match model input {expected}")]
    Width { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(ModelError::Spec(format!(
                "input_dim {} and hidden_dims {:?} must be non-empty and positive",
                self.input_dim, self.hidden_dims
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Spec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims
    }
}

/// Fully connected layer, `y = W x + b` with `W` of shape out x in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn rounded_to_f32(&self) -> Self {
        Self { weight: self.weight.mapv(|v| v as f32 as f64), bias: self.bias.mapv(|v| v as f32 as f64) }
    }

    /// `X W^T + b` for a batch of row vectors.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub spec: MlpSpec,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Linear>,
    /// 1-based epoch the weights were taken at; 0 for untrained models.
    pub epoch: usize,
    pub training_log: Vec<EpochRecord>,
}

/// Forward pass with every hidden activation retained.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Post-ReLU output of each hidden layer.
    pub activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn penultimate(&self) -> &Array2<f64> {
        self.activations.last().expect("at least one hidden layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointPair {
    /// Best validation accuracy, earliest epoch on ties.
    pub early: ClassifierModel,
    pub last: ClassifierModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.05, batch_size: 64, momentum: default_momentum() }
    }
}

/// Gradient objectives for [`input_gradient`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientObjective {
    /// `log max_c softmax(z / T)_c`, the class being the argmax at the input.
    LogMaxSoftmax { temperature: f64 },
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(logits: &Array2<f64>) -> Vec<usize> {
    logits.outer_iter().map(argmax).collect()
}

impl ClassifierModel {
    /// Fresh model with weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Stream::new(spec.seed, streams::INIT);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(out, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((out, fan_in), |_| bound * (2.0 * rng.uniform() - 1.0));
                let bias = Array1::from_shape_fn(out, |_| bound * (2.0 * rng.uniform() - 1.0));
                Linear { weight, bias }
            })
            .collect();
        Ok(Self { spec, layers, epoch: 0, training_log: Vec::new() })
    }

    pub fn last_layer(&self) -> &Linear {
        self.layers.last().expect("output layer")
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn penultimate_dim(&self) -> usize {
        *self.spec.hidden_dims.last().expect("validated spec")
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<ForwardTrace> {
        if x.ncols() != self.spec.input_dim {
            return Err(ModelError::Width { expected: self.spec.input_dim, got: x.ncols() });
        }
        let (hidden, output) = self.layers.split_at(self.layers.len() - 1);
        let mut activations = Vec::with_capacity(hidden.len());
        let mut h = x.to_owned();
        for layer in hidden {
            h = layer.apply(h.view());
            relu_inplace(&mut h);
            activations.push(h.clone());
        }
        let logits = output[0].apply(h.view());
        Ok(ForwardTrace { activations, logits })
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// Gradients of `log max softmax(z(x)/T)` for each row of `x`.
    pub fn input_gradients(&self, x: ArrayView2<f64>, objective: GradientObjective) -> Result<Array2<f64>> {
        let GradientObjective::LogMaxSoftmax { temperature } = objective;
        if x.iter().any(|v| !v.is_finite()) || !(temperature > 0.0) {
            return Err(ModelError::NonFinite);
        }
        let trace = self.forward_trace(x)?;
        // d/dz_c [z_y/T - logsumexp(z/T)] = (1[c = y] - p_c) / T
        let mut grad = trace.logits.clone();
        for mut row in grad.outer_iter_mut() {
            let y = argmax(row.view());
            let max = row[y];
            row.mapv_inplace(|v| ((v - max) / temperature).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| -v / sum / temperature);
            row[y] += 1.0 / temperature;
        }
        backprop_to_input(&self.layers, &trace.activations, grad)
    }
}

/// Pushes `d(objective)/d(logits)` back to the input through the ReLU net.
fn backprop_to_input(layers: &[Linear], activations: &[Array2<f64>], grad_logits: Array2<f64>) -> Result<Array2<f64>> {
    let mut g = grad_logits;
    for l in (0..layers.len()).rev() {
        g = g.dot(&layers[l].weight);
        if l > 0 {
            let act = &activations[l - 1];
            g.zip_mut_with(act, |gv, &a| {
                if a <= 0.0 {
                    *gv = 0.0
                }
            });
        }
    }
    Ok(g)
}

pub fn forward_trace(model: &ClassifierModel, features: ArrayView2<f64>) -> Result<ForwardTrace> {
    model.forward_trace(features)
}

/// Exact gradient of the objective with respect to a single input vector.
pub fn input_gradient(model: &ClassifierModel, x: ArrayView1<f64>, objective: GradientObjective) -> Result<Array1<f64>> {
    let batch = x.insert_axis(Axis(0));
    Ok(model.input_gradients(batch, objective)?.row(0).to_owned())
}

/// Mean cross-entropy and accuracy of a model on labelled rows.
pub fn evaluate(model: &ClassifierModel, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    let logits = model.logits(x)?;
    Ok(loss_and_accuracy(&logits, labels))
}

fn loss_and_accuracy(logits: &Array2<f64>, labels: &[usize]) -> (f64, f64) {
    let n = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &y) in logits.outer_iter().zip(labels) {
        let lse = crate::numerics::logsumexp_unchecked(row.as_slice().unwrap_or(&row.to_vec()), 1.0);
        loss += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
    }
    (loss / n, correct as f64 / n)
}

fn labelled_inputs(bundle: &TensorBundle, num_classes: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let x = bundle.matrix(FEAT)?;
    let y = bundle.labels(LABEL)?;
    if let Some(&bad) = y.iter().find(|&&v| v >= num_classes) {
        return Err(ModelError::Spec(format!("label {bad} out of range for {num_classes} classes in `{}`", bundle.name)));
    }
    Ok((x, y))
}

/// Trains an MLP and returns its early (best validation accuracy) and last
/// checkpoints. Deterministic given `spec.seed`.
pub fn train(spec: &MlpSpec, train_set: &TensorBundle, val_set: &TensorBundle, config: &TrainConfig) -> Result<CheckpointPair> {
    spec.validate()?;
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(ModelError::Spec(format!("invalid training config {config:?}")));
    }
    let (x, y) = labelled_inputs(train_set, spec.num_classes)?;
    let (xv, yv) = labelled_inputs(val_set, spec.num_classes)?;
    if x.ncols() != spec.input_dim {
        return Err(ModelError::Width { expected: spec.input_dim, got: x.ncols() });
    }
    let mut counts = vec![0usize; spec.num_classes];
    y.iter().for_each(|&c| counts[c] += 1);
    for (c, &k) in counts.iter().enumerate() {
        if k == 0 {
            log::warn!("class {c} has no training samples in `{}`", train_set.name);
        }
    }

    let mut model = ClassifierModel::init(spec.clone())?;
    let mut velocity: Vec<Linear> = model
        .layers
        .iter()
        .map(|l| Linear { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
        .collect();
    let mut shuffle_rng = Stream::new(spec.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ClassifierModel)> = None;
    let mut last = None;

    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (loss, hits) = sgd_step(&mut model.layers, &mut velocity, xb.view(), &yb, config);
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let snapshot = ClassifierModel {
            spec: spec.clone(),
            layers: model.layers.iter().map(Linear::rounded_to_f32).collect(),
            epoch,
            training_log: Vec::new(),
        };
        let (val_loss, val_accuracy) = evaluate(&snapshot, xv.view(), &yv)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / x.nrows() as f64,
            train_accuracy: correct as f64 / x.nrows() as f64,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, snapshot.clone()));
        }
        last = Some(snapshot);
    }
    let mut early = best.expect("epochs >= 1").1;
    let mut last = last.expect("epochs >= 1");
    early.training_log = log.clone();
    last.training_log = log;
    Ok(CheckpointPair { early, last })
}

/// One momentum-SGD step on a minibatch; returns (mean loss, correct count).
fn sgd_step(layers: &mut [Linear], velocity: &mut [Linear], xb: ArrayView2<f64>, yb: &[usize], config: &TrainConfig) -> (f64, usize) {
    let bsz = yb.len() as f64;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut h = xb.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        let mut out = layer.apply(h.view());
        if l + 1 < layers.len() {
            relu_inplace(&mut out);
        }
        inputs.push(h);
        h = out;
    }
    // h now holds the logits; turn it into d(mean CE)/d(logits).
    let mut loss = 0.0;
    let mut hits = 0;
    for (mut row, &y) in h.outer_iter_mut().zip(yb) {
        let pred = argmax(row.view());
        if pred == y {
            hits += 1;
        }
        let max = row[pred];
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss += sum.ln() - (row[y].ln());
        row.mapv_inplace(|v| v / sum / bsz);
        row[y] -= 1.0 / bsz;
    }
    let mut grad = h;
    for l in (0..layers.len()).rev() {
        let input = &inputs[l];
        let gw = grad.t().dot(input);
        let gb = grad.sum_axis(Axis(0));
        if l > 0 {
            let mut back = grad.dot(&layers[l].weight);
            back.zip_mut_with(input, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            grad = back;
        }
        let v = &mut velocity[l];
        v.weight.zip_mut_with(&gw, |vv, &g| *vv = config.momentum * *vv + g);
        v.bias.zip_mut_with(&gb, |vv, &g| *vv = config.momentum * *vv + g);
        layers[l].weight.scaled_add(-config.lr, &v.weight);
        layers[l].bias.scaled_add(-config.lr, &v.bias);
    }
    (loss / bsz, hits)
}

/// Runs the model over `data["feat"]` and returns a bundle with the raw
/// inputs (`input`), penultimate features (`feat`), logits (`logit`), all
/// label tensors, and optionally every hidden layer (`act.<i>`).
pub fn export_bundle(model: &ClassifierModel, data: &TensorBundle, include_layers: bool) -> Result<TensorBundle> {
    let x = data.matrix(FEAT)?;
    let trace = model.forward_trace(x.view())?;
    let mut out = TensorBundle::new(data.name.clone());
    out.extensions = data.extensions.clone();
    out.insert(INPUT, data.require(FEAT)?.clone());
    out.insert(FEAT, Tensor::from_matrix(trace.penultimate()));
    out.insert(LOGIT, Tensor::from_matrix(&trace.logits));
    if include_layers {
        for (i, a) in trace.activations.iter().enumerate() {
            out.insert(format!("{ACT_PREFIX}{i}"), Tensor::from_matrix(a));
        }
    }
    for (key, t) in &data.tensors {
        if key == LABEL || key.starts_with("label.") {
            out.insert(key.clone(), t.clone());
        }
    }
    out.validate()?;
    Ok(out)
}

pub fn model_to_bundle(model: &ClassifierModel) -> TensorBundle {
    let mut b = TensorBundle::new(format!("mlp-epoch{}", model.epoch));
    for (i, layer) in model.layers.iter().enumerate() {
        b.insert(format!("layer.{i}.W"), Tensor::from_matrix(&layer.weight));
        let bias: Vec<f32> = layer.bias.iter().map(|&v| v as f32).collect();
        b.insert(format!("layer.{i}.b"), Tensor::f32(vec![bias.len()], bias).expect("shape"));
    }
    b.extensions.insert("mlp_spec".into(), serde_json::to_value(&model.spec).expect("spec"));
    b.extensions.insert("epoch".into(), model.epoch.into());
    b.extensions.insert("training_log".into(), serde_json::to_value(&model.training_log).expect("log"));
    b
}

pub fn model_from_bundle(b: &TensorBundle) -> Result<ClassifierModel> {
    let ext = |k: &str| {
        b.extensions.get(k).cloned().ok_or_else(|| ModelError::Spec(format!("model bundle lacks extension `{k}`")))
    };
    let spec: MlpSpec = serde_json::from_value(ext("mlp_spec")?).map_err(|e| ModelError::Spec(e.to_string()))?;
    spec.validate()?;
    let epoch: usize = serde_json::from_value(ext("epoch")?).map_err(|e| ModelError::Spec(e.to_string()))?;
    let training_log = serde_json::from_value(ext("training_log")?).map_err(|e| ModelError::Spec(e.to_string()))?;
    let mut layers = Vec::new();
    for (i, (out, fan_in)) in spec.layer_dims().into_iter().enumerate() {
        let weight = b.matrix(&format!("layer.{i}.W"))?;
        let bias = b.matrix(&format!("layer.{i}.b"))?.column(0).to_owned();
        if weight.dim() != (out, fan_in) || bias.len() != out {
            return Err(ModelError::Spec(format!("layer {i} has shape {:?}, expected ({out}, {fan_in})", weight.dim())));
        }
        layers.push(Linear { weight, bias });
    }
    Ok(ClassifierModel { spec, layers, epoch, training_log })
}

pub fn save_model(model: &ClassifierModel, dir: &Path) -> Result<()> {
    Ok(tensor_io::write_bundle(&model_to_bundle(model), dir)?)
}

pub fn load_model(dir: &Path) -> Result<ClassifierModel> {
    model_from_bundle(&tensor_io::read_bundle(dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_model(layers: Vec<Linear>, input_dim: usize, hidden: Vec<usize>, classes: usize) -> ClassifierModel {
        ClassifierModel {
            spec: MlpSpec { input_dim, hidden_dims: hidden, num_classes: classes, seed: 0 },
            layers,
            epoch: 0,
            training_log: Vec::new(),
        }
    }

    #[test]
    fn zero_model_gives_zero_trace_and_gradient() {
        let spec = MlpSpec { input_dim: 3, hidden_dims: vec![4, 2], num_classes: 3, seed: 1 };
        let mut m = ClassifierModel::init(spec).unwrap();
        for l in &mut m.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        let t = m.forward_trace(x.view()).unwrap();
        assert!(t.activations.iter().all(|a| a.iter().all(|&v| v == 0.0)));
        assert!(t.logits.iter().all(|&v| v == 0.0));
        let g = input_gradient(&m, x.row(0), GradientObjective::LogMaxSoftmax { temperature: 1.0 }).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_toy_penultimate() {
        let m = toy_model(
            vec![
                Linear { weight: array![[1.0]], bias: array![0.0] },
                Linear { weight: array![[1.0], [-1.0]], bias: array![0.0, 0.0] },
            ],
            1,
            vec![1],
            2,
        );
        let t = m.forward_trace(array![[2.0]].view()).unwrap();
        assert_eq!(t.penultimate(), &array![[2.0]]);
        assert_eq!(t.logits, array![[2.0, -2.0]]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = ClassifierModel::init(MlpSpec { input_dim: 3, hidden_dims: vec![2], num_classes: 2, seed: 0 }).unwrap();
        assert!(matches!(m.forward_trace(array![[1.0, 2.0]].view()), Err(ModelError::Width { .. })));
    }

    #[test]
    fn linear_binary_gradient_closed_form() {
        // Hidden ReLU layer is the identity on x >= 0 inputs of a 1-d model,
        // so z = (x, -x), p_0 = sigmoid(2x), and at x = 0 the argmax is class 0:
        // d/dx log p_0 = 2 (1 - p_0) = 1.
        let m = toy_model(
            vec![
                Linear { weight: array![[1.0], [-1.0]], bias: array![0.0, 0.0] },
                Linear { weight: array![[1.0, -1.0], [-1.0, 1.0]], bias: array![0.0, 0.0] },
            ],
            1,
            vec![2],
            2,
        );
        // at x = 0 both hidden units sit at the ReLU kink and are inactive
        let g = input_gradient(&m, array![0.0].view(), GradientObjective::LogMaxSoftmax { temperature: 1.0 }).unwrap();
        assert_eq!(g[0], 0.0);
        // at x = 0.5: h = (0.5, 0), z = (0.5, -0.5), p0 = sigmoid(1)
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        let g = input_gradient(&m, array![0.5].view(), GradientObjective::LogMaxSoftmax { temperature: 1.0 }).unwrap();
        assert!((g[0] - 2.0 * (1.0 - p0)).abs() < 1e-12);

        // Linear logits z = (1 + x, 1 - x) through active hidden units; at
        // x = 0 the tie resolves to class 0 and d/dx log p_0 = (1 - p0) + p1 = 1.
        let m = toy_model(
            vec![
                Linear { weight: array![[1.0], [-1.0]], bias: array![1.0, 1.0] },
                Linear { weight: array![[1.0, 0.0], [0.0, 1.0]], bias: array![0.0, 0.0] },
            ],
            1,
            vec![2],
            2,
        );
        let g = input_gradient(&m, array![0.0].view(), GradientObjective::LogMaxSoftmax { temperature: 1.0 }).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn model_bundle_round_trip_is_exact() {
        let spec = MlpSpec { input_dim: 4, hidden_dims: vec![5, 3], num_classes: 3, seed: 9 };
        let mut m = ClassifierModel::init(spec).unwrap();
        m.layers = m.layers.iter().map(Linear::rounded_to_f32).collect();
        m.epoch = 4;
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }
}
