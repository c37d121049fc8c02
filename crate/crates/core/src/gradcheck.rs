//! Central finite-difference check of the entropy-loss gradient.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generation::Sequence;
use crate::model::{weight_names, ModelParams};
use crate::objective::{em_loss, em_loss_value, Averaging};
use crate::tensor::Tape;

/// Denominator floor of the relative error, so that parameters with
/// vanishing gradients are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Analytic gradient of the loss for `batch` at `params`.
pub fn em_gradient(params: &ModelParams, batch: &[Sequence], averaging: Averaging) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let w = params.register(&mut tape);
    let loss = em_loss(&mut tape, &params.config, &w, batch, averaging)?;
    let mut grads = tape.backward(loss)?;
    Ok(w.iter().map(|&v| grads.take(v).expect("parameters receive gradients").into_data()).collect())
}

/// Compare every partial derivative with `(L(θ + h) − L(θ − h)) / 2h`.
pub fn check_em_gradient(params: &ModelParams, batch: &[Sequence], h: f64) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = em_gradient(params, batch, Averaging::PerSequence)?;
    let names = weight_names(params.config.n_layers);
    let mut probe = params.clone();
    let mut report = GradCheck { checked: 0, max_relative_error: 0.0, worst_parameter: String::new(), worst_index: 0 };
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let original = probe.weights.iter().nth(t).unwrap().data()[i];
            set(&mut probe, t, i, original + h);
            let up = em_loss_value(&probe, batch, Averaging::PerSequence)?;
            set(&mut probe, t, i, original - h);
            let down = em_loss_value(&probe, batch, Averaging::PerSequence)?;
            set(&mut probe, t, i, original);
            let err = relative_error(a, (up - down) / (2.0 * h));
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = names[t].clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn set(params: &mut ModelParams, tensor: usize, index: usize, value: f64) {
    params.weights.iter_mut().nth(tensor).unwrap().data_mut()[index] = value;
}
