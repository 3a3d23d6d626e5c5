//! Membership-gated mixture of feed-forward experts.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::math;
use crate::tensor::Tensor;

use super::{dropout, ExpertVars, ForwardCtx, ModelConfig};

pub const GATE_CLAMP: f64 = 30.0;
pub const GATE_TEMPERATURE: f64 = 0.5;
pub const GUMBEL_CLIP: f64 = 1e-6;
pub const RENORM_GUARD: f64 = 1e-6;

/// Routing diagnostics of one mixture call.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeStats {
    /// Mean routing weight per expert over `(B, T)`.
    pub usage: Vec<f64>,
    /// `mean_e (usage_e - 1/E)^2`
    pub lb_reg: f64,
}

/// `mean_e (p_e - 1/E)^2`
pub fn load_balance(usage: &[f64]) -> f64 {
    let e = usage.len() as f64;
    usage.iter().map(|&p| (p - 1.0 / e) * (p - 1.0 / e)).sum::<f64>() / e
}

/// Keeps the `k` largest entries of each row (ties broken towards the lower
/// index) as a 0/1 mask.
pub fn top_k_mask(y: &Tensor, k: usize) -> Tensor {
    let e = *y.shape().last().unwrap_or(&1);
    let mut mask = Tensor::zeros(y.shape());
    let mut order: Vec<usize> = (0..e).collect();
    for (row, m) in y.data().chunks(e).zip(mask.data_mut().chunks_mut(e)) {
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in order.iter().take(k.min(e)) {
            m[j] = 1.0;
        }
    }
    mask
}

pub(crate) fn fuzzy_moe(
    tape: &mut Tape,
    x: Var,
    mu: Var,
    gate: Var,
    experts: &[ExpertVars],
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, MoeStats)> {
    let logits = tape.matmul(mu, gate)?; // [B,T,E]
    let mut logits = tape.clamp(logits, -GATE_CLAMP, GATE_CLAMP);
    if !ctx.deterministic {
        let shape = tape.shape(logits).to_vec();
        let rng = &mut ctx.rng;
        let g = Tensor::from_fn(&shape, |_| {
            let u = rng.uniform().clamp(GUMBEL_CLIP, 1.0 - GUMBEL_CLIP);
            -math::ln(-math::ln(u))
        });
        let g = tape.constant(g);
        logits = tape.add(logits, g)?;
    }
    let y = tape.scale(logits, 1.0 / GATE_TEMPERATURE);
    let y = tape.softmax(y);
    let y = tape.nan_to_num(y, 0.0, 1.0, 0.0);
    let mask = tape.constant(top_k_mask(tape.value(y), cfg.top_k));
    let kept = tape.mul(y, mask)?;
    let denom = tape.sum_axis(kept, 2)?;
    let denom = tape.add_scalar(denom, RENORM_GUARD);
    let y = tape.div(kept, denom)?;

    let e = experts.len();
    let yv = tape.value(y);
    let rows = yv.len() / e;
    let mut usage = vec![0.0; e];
    for row in yv.data().chunks(e) {
        for (u, &p) in usage.iter_mut().zip(row) {
            *u += p;
        }
    }
    usage.iter_mut().for_each(|u| *u /= rows as f64);

    let mut out: Option<Var> = None;
    for (i, ex) in experts.iter().enumerate() {
        let h = tape.matmul(x, ex.w1)?;
        let h = tape.add(h, ex.b1)?;
        let h = tape.gelu(h);
        let h = dropout(tape, h, ctx);
        let h = tape.matmul(h, ex.w2)?;
        let h = tape.add(h, ex.b2)?;
        let h = dropout(tape, h, ctx);
        let w = tape.select_last(y, i)?;
        let term = tape.mul(w, h)?;
        out = Some(match out {
            Some(o) => tape.add(o, term)?,
            None => term,
        });
    }
    let lb_reg = load_balance(&usage);
    Ok((out.expect("at least one expert"), MoeStats { usage, lb_reg }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_keeps_largest() {
        let y = Tensor::from_rows(&[&[0.1, 0.5, 0.4], &[0.3, 0.3, 0.4]]).unwrap();
        let m = top_k_mask(&y, 2);
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(top_k_mask(&y, 3).data(), &[1.0; 6]);
    }

    #[test]
    fn load_balance_zero_iff_uniform() {
        assert_eq!(load_balance(&[0.25; 4]), 0.0);
        assert_eq!(load_balance(&[1.0]), 0.0);
        assert!(load_balance(&[0.5, 0.3, 0.2]) > 0.0);
    }
}
