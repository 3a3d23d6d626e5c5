//! Label-smoothed optimization loss with an entropy floor, and unsmoothed
//! cross-entropy for reporting.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

use super::{ForwardOutput, ModelConfig};

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// What the optimizer minimizes.
    pub loss: Var,
    pub ce_pure_sum: f64,
    pub ce_smoothed_sum: f64,
    pub tokens: usize,
    /// Value of the entropy-floor term added to `loss` (zero outside training).
    pub entropy_penalty: f64,
}

impl LossParts {
    /// Reported cross-entropy per token.
    pub fn ce(&self) -> f64 {
        self.ce_pure_sum / self.tokens.max(1) as f64
    }
}

/// Summed unsmoothed cross-entropy of `logits` (`[.., V]`) against `targets`.
pub fn cross_entropy_pure(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let v = *logits.shape().last().unwrap_or(&0);
    if v == 0 || logits.len() != targets.len() * v {
        return Err(Error::shape(
            "cross_entropy",
            alloc::format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(v).zip(targets) {
        if y >= v {
            return Err(Error::TokenOutOfRange { token: y, vocab: v });
        }
        total += math::log_sum_exp(row) - row[y];
    }
    Ok(total)
}

/// `smoothed CE sum + [training and R >= 2] alpha/2 (1 + lambda_sat) relu(eta log R - H(mu))`.
pub fn lm_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    targets: &[usize],
    cfg: &ModelConfig,
    training: bool,
    lambda_sat: f64,
) -> Result<LossParts> {
    let shape = tape.shape(out.logits).to_vec();
    let v = *shape.last().unwrap_or(&0);
    let n = targets.len();
    let flat = tape.reshape(out.logits, &[n, v])?;
    let ce_pure_sum = cross_entropy_pure(tape.value(flat), targets)?;
    let smoothed = tape.cross_entropy_sum(flat, targets, cfg.label_smooth)?;
    let ce_smoothed_sum = tape.value(smoothed).item();
    let mut loss = smoothed;
    let mut entropy_penalty = 0.0;
    if training && cfg.regimes >= 2 {
        let h_max = math::ln(cfg.regimes.max(2) as f64);
        let gap = tape.neg(out.mu_entropy);
        let gap = tape.add_scalar(gap, cfg.ent_floor_eta * h_max);
        let pen = tape.relu(gap);
        let pen = tape.scale(pen, cfg.ent_floor_alpha * 0.5 * (1.0 + lambda_sat));
        entropy_penalty = tape.value(pen).item();
        loss = tape.add(loss, pen)?;
    }
    Ok(LossParts {
        loss,
        ce_pure_sum,
        ce_smoothed_sum,
        tokens: n,
        entropy_penalty,
    })
}
