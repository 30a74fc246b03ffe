//! Temperature-scaled softmax on a gradient-sign perturbed input.

use ndarray::{Array2, ArrayView2};

use super::logit::msp;
use crate::classifier::{ClassifierModel, GradientObjective, ModelError};

pub const MAGNITUDE_GRID: [f64; 6] = [0.0, 0.0005, 0.001, 0.0014, 0.002, 0.005];
pub const TEMPERATURE_GRID: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + m * sign(grad_x log max softmax(z(x) / t))` for each row.
pub fn perturb(model: &ClassifierModel, inputs: ArrayView2<f64>, temperature: f64, magnitude: f64) -> Result<Array2<f64>, ModelError> {
    let grad = model.input_gradients(inputs, GradientObjective::LogMaxSoftmax { temperature })?;
    Ok(&inputs + &grad.mapv(|g| magnitude * sign(g)))
}

/// ODIN scores. With `magnitude == 0` the given logits are used directly
/// and no model pass is needed.
pub fn odin_scores(
    model: Option<&ClassifierModel>,
    inputs: Option<ArrayView2<f64>>,
    logits: ArrayView2<f64>,
    temperature: f64,
    magnitude: f64,
) -> Result<Vec<f64>, super::DetectorError> {
    let shifted;
    let z = if magnitude == 0.0 {
        logits
    } else {
        let model = model.ok_or(super::DetectorError::Missing("model"))?;
        let inputs = inputs.ok_or(super::DetectorError::Missing("input tensor"))?;
        shifted = model.logits(perturb(model, inputs, temperature, magnitude)?.view())?;
        shifted.view()
    };
    Ok(z.outer_iter().map(|row| msp(row.as_slice().expect("contiguous logits"), temperature)).collect())
}
