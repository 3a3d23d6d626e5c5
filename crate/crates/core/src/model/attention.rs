//! Causal multi-head attention with an additive prior and a
//! membership-driven value gate.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;

use super::{dropout, AttentionVars, ForwardCtx, ModelConfig};

/// `x`: `[B, T, D]` (already normalized), `mu`: `[B, T, R]`, `bias`: `[T, T]`.
/// Returns the gated, dropped-out projection `[B, T, D]` and the attention
/// probabilities `[B, H, T, T]`.
pub(crate) fn biased_attention(
    tape: &mut Tape,
    x: Var,
    mu: Var,
    bias: Var,
    w: &AttentionVars,
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, Var)> {
    let xs = tape.shape(x).to_vec();
    let (b, t, d) = (xs[0], xs[1], xs[2]);
    if t == 0 {
        return Err(Error::shape("attention", "empty sequence"));
    }
    let (h, hd) = (cfg.heads, cfg.head_dim());
    let split = |tape: &mut Tape, w: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, &[b, t, h, hd])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, w.wq)?;
    let k = split(tape, w.wk)?;
    let v = split(tape, w.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / math::sqrt(hd as f64));
    let scores = tape.add(scores, bias)?;
    ctx.counters.bias_adds += 1;
    ctx.counters.attention_calls += 1;
    let scores = tape.causal_mask(scores)?;
    let probs = tape.softmax(scores);
    let attn = dropout(tape, probs, ctx);

    let heads = tape.matmul(attn, v)?; // [B,H,T,Hd]
    let gamma = tape.matmul(mu, w.value_gamma)?; // [B,T,H]
    let gamma = tape.mean_axis(gamma, 1)?; // [B,1,H]
    let gate = tape.sigmoid(gamma);
    let out = if cfg.per_head_gate {
        let g = tape.reshape(gate, &[b, h, 1, 1])?;
        let gated = tape.mul(heads, g)?;
        let merged = tape.permute(gated, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, &[b, t, d])?;
        tape.matmul(merged, w.out_proj)?
    } else {
        let merged = tape.permute(heads, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, &[b, t, d])?;
        let out = tape.matmul(merged, w.out_proj)?;
        let g = tape.mean_axis(gate, 2)?; // [B,1,1]
        tape.mul(out, g)?
    };
    Ok((dropout(tape, out, ctx), probs))
}
