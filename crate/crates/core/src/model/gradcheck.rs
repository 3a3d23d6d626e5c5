//! Central finite-difference check of every model parameter.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{max_relative_error, numeric_gradient, Tape};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{lm_loss, ForwardCtx, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `(name, max elementwise relative error)` per parameter.
    pub params: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst: String,
    pub scalars: usize,
}

fn loss_value(
    model: &Model,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    len: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(Rng::new(0), 0.0, true);
    let out = model.forward(&mut tape, tokens, batch, len, &mut ctx)?;
    let parts = lm_loss(&mut tape, &out, targets, model.config(), true, 0.0)?;
    Ok(tape.value(parts.loss).item())
}

/// Compares reverse-mode gradients of the training loss (deterministic
/// mode) with central differences of step `h`. Errors are
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &Model,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    len: usize,
    h: f64,
    floor: f64,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(Rng::new(0), 0.0, true);
    let out = model.forward(&mut tape, tokens, batch, len, &mut ctx)?;
    let parts = lm_loss(&mut tape, &out, targets, model.config(), true, 0.0)?;
    let grads = tape.backward(parts.loss)?;
    let mut probe = model.clone();
    let mut report = GradReport {
        params: Vec::new(),
        max_rel_err: 0.0,
        worst: String::new(),
        scalars: 0,
    };
    for (id, name, value) in model.params().iter() {
        let analytic = grads.param(id).unwrap_or_else(|| Tensor::zeros(value.shape()));
        let mut failure = None;
        let numeric = numeric_gradient(value, h, |x| {
            *probe.params_mut().get_mut(id) = x.clone();
            match loss_value(&probe, tokens, targets, batch, len) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        });
        *probe.params_mut().get_mut(id) = value.clone();
        if let Some(e) = failure {
            return Err(e);
        }
        let err = max_relative_error(&analytic, &numeric, floor);
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = String::from(name);
        }
        report.scalars += value.len();
        report.params.push((String::from(name), err));
    }
    Ok(report)
}
