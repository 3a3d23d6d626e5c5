//! Regime-position alignment: a length-aware additive attention prior.
//!
//! Soft raised-cosine blocks `Phi(T)` tile the positions of a window. Batch
//! co-occurrence scores `S = mean_b mu_b^T Phi` between regimes and blocks
//! are turned into an approximately doubly-stochastic plan
//! `P = sinkhorn(exp(S / tau_align))`, and the prior is
//!
//! `B[s, t] = mean_b sum_k (mu_b P)[s, k] Phi[t, k]`
//!
//! optionally blended with a distance penalty, z-scored over the whole
//! matrix, divided by the clamped attention temperature, clipped and
//! scaled by the warm-in factor.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fuzzy::MembershipTensor;
use crate::math;
use crate::tensor::{contract, Tensor};

pub const ROW_GUARD: f64 = 1e-6;
pub const SINKHORN_GUARD: f64 = 1e-9;
pub const KERNEL_MIN: f64 = 1e-9;
pub const KERNEL_MAX: f64 = 1e9;
pub const STD_GUARD: f64 = 1e-6;
/// Lower clamp on the attention temperature inside the bias path.
pub const BIAS_TAU_MIN: f64 = 0.6;
pub const DEFAULT_POS_BETA: f64 = 0.2;
pub const DEFAULT_KAPPA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpaConfig {
    /// Number of positional blocks; `0` means "same as the regime count".
    pub blocks: usize,
    pub tau_align: f64,
    pub sinkhorn_iters: usize,
    /// Weight of the distance penalty blended into the raw prior.
    pub posmix: f64,
    /// Stop gradients at the co-occurrence scores before Sinkhorn.
    pub detach_scores: bool,
    pub warm_steps: usize,
    pub clip: f64,
    pub tau_max: f64,
}

impl Default for RpaConfig {
    fn default() -> Self {
        Self {
            blocks: 0,
            tau_align: 0.70,
            sinkhorn_iters: 6,
            posmix: 0.10,
            detach_scores: true,
            warm_steps: 1200,
            clip: 4.0,
            tau_max: 1.6,
        }
    }
}

impl RpaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_align > 0.0) {
            return Err(Error::arg("tau_align", "must be positive"));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::arg("sinkhorn_iters", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.posmix) {
            return Err(Error::arg("posmix", "must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::arg("clip", "must be positive"));
        }
        if !(self.tau_max >= BIAS_TAU_MIN) {
            return Err(Error::arg("tau_max", "must be at least 0.6"));
        }
        Ok(())
    }

    pub fn blocks_for(&self, regimes: usize) -> usize {
        if self.blocks > 0 {
            self.blocks
        } else {
            regimes
        }
    }
}

/// Linear warm-in `min(1, step / max(1, warm_steps))`.
pub fn warm_in(step: usize, warm_steps: usize) -> f64 {
    f64::min(1.0, step as f64 / warm_steps.max(1) as f64)
}

/// Row-stochastic soft-block basis `Phi(T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalBasis {
    /// `[T, K]`
    pub phi: Tensor,
    pub centers: Vec<f64>,
    pub half_width: f64,
}

/// Raised-cosine blocks with centers evenly spaced on `[0, T-1]` and
/// half-width `max(1, 1.5 T / K)`, rows normalized by `rowsum + 1e-6`.
pub fn soft_blocks(len: usize, blocks: usize) -> Result<PositionalBasis> {
    if len == 0 {
        return Err(Error::arg("T", "length must be at least 1"));
    }
    if blocks == 0 {
        return Err(Error::arg("K", "block count must be at least 1"));
    }
    let centers: Vec<f64> = if blocks == 1 {
        vec![0.0]
    } else {
        let step = (len - 1) as f64 / (blocks - 1) as f64;
        (0..blocks).map(|k| k as f64 * step).collect()
    };
    let w = f64::max(1.0, len as f64 / blocks as f64 * 1.5);
    let mut phi = Tensor::zeros(&[len, blocks]);
    for (t, row) in phi.data_mut().chunks_mut(blocks).enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            let dist = math::abs(t as f64 - centers[k]) / w;
            if dist <= 1.0 {
                *v = 0.5 * (1.0 + math::cos(dist.clamp(0.0, 1.0) * PI));
            }
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s + ROW_GUARD;
        }
    }
    Ok(PositionalBasis {
        phi,
        centers,
        half_width: w,
    })
}

/// `|s - t| / max(1, T - 1)`.
pub fn pos_distance(len: usize) -> Tensor {
    let denom = f64::max(1.0, len as f64 - 1.0);
    Tensor::from_fn(&[len, len], |i| math::abs(i[0] as f64 - i[1] as f64) / denom)
}

/// Alternating row-then-column normalization, `iters` rounds, each
/// division guarded by `+1e-9`. The last operation is a column step.
pub fn sinkhorn(x: &Tensor, iters: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = sinkhorn_on_tape(&mut tape, v, iters)?;
    Ok(tape.value(out).clone())
}

pub fn sinkhorn_on_tape(tape: &mut Tape, x: Var, iters: usize) -> Result<Var> {
    if tape.shape(x).len() != 2 {
        return Err(Error::shape("sinkhorn", format!("{:?}", tape.shape(x))));
    }
    let mut x = x;
    for _ in 0..iters {
        let rs = tape.sum_axis(x, 1)?;
        let rs = tape.add_scalar(rs, SINKHORN_GUARD);
        x = tape.div(x, rs)?;
        let cs = tape.sum_axis(x, 0)?;
        let cs = tape.add_scalar(cs, SINKHORN_GUARD);
        x = tape.div(x, cs)?;
    }
    Ok(x)
}

/// Sinkhorn scaling of a positive matrix to row marginals `rows` and column
/// marginals `cols` (equal totals), iterated until both marginal errors fall
/// below `tol` or `max_iters` rounds pass. Ends on a column step.
pub fn sinkhorn_marginals(
    x: &Tensor,
    rows: &[f64],
    cols: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<Tensor> {
    if x.rank() != 2 || x.dim(0) != rows.len() || x.dim(1) != cols.len() {
        return Err(Error::shape(
            "sinkhorn_marginals",
            format!("{:?} vs marginals {}x{}", x.shape(), rows.len(), cols.len()),
        ));
    }
    if x.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::arg("x", "entries must be strictly positive"));
    }
    let (n, k) = (rows.len(), cols.len());
    let mut a = x.clone();
    for _ in 0..max_iters {
        let d = a.data_mut();
        for i in 0..n {
            let s: f64 = d[i * k..(i + 1) * k].iter().sum();
            for v in &mut d[i * k..(i + 1) * k] {
                *v *= rows[i] / s;
            }
        }
        for j in 0..k {
            let s: f64 = (0..n).map(|i| d[i * k + j]).sum();
            for i in 0..n {
                d[i * k + j] *= cols[j] / s;
            }
        }
        let row_err = (0..n)
            .map(|i| math::abs(d[i * k..(i + 1) * k].iter().sum::<f64>() - rows[i]))
            .fold(0.0, f64::max);
        if row_err < tol {
            break;
        }
    }
    Ok(a)
}

/// Co-occurrence scores and their Sinkhorn plan.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPlan {
    /// `[R, K]`
    pub scores: Tensor,
    /// `[R, K]`
    pub plan: Tensor,
}

/// `S = mean_b mu_b^T Phi` and `P = sinkhorn(clamp(exp(S / tau_align), 1e-9, 1e9))`.
pub fn align_scores(
    mu: &MembershipTensor,
    basis: &PositionalBasis,
    tau_align: f64,
    iters: usize,
) -> Result<AlignmentPlan> {
    if !(tau_align > 0.0) {
        return Err(Error::arg("tau_align", "must be positive"));
    }
    let mut tape = Tape::new();
    let m = tape.constant(mu.tensor().clone());
    let phi = tape.constant(basis.phi.clone());
    let (s, p) = align_on_tape(&mut tape, m, phi, tau_align, iters, false)?;
    Ok(AlignmentPlan {
        scores: tape.value(s).clone(),
        plan: tape.value(p).clone(),
    })
}

fn align_on_tape(
    tape: &mut Tape,
    mu: Var,
    phi: Var,
    tau_align: f64,
    iters: usize,
    detach: bool,
) -> Result<(Var, Var)> {
    let ms = tape.shape(mu).to_vec();
    let ps = tape.shape(phi).to_vec();
    if ms.len() != 3 || ps.len() != 2 || ms[1] != ps[0] {
        return Err(Error::shape("align_scores", format!("mu {ms:?} vs Phi {ps:?}")));
    }
    let s = tape.contract(mu, phi, "btr,tk->rk")?;
    let s = tape.scale(s, 1.0 / ms[0] as f64);
    let s_in = if detach { tape.detach(s) } else { s };
    let k = tape.scale(s_in, 1.0 / tau_align);
    let k = tape.exp(k);
    let k = tape.clamp(k, KERNEL_MIN, KERNEL_MAX);
    let p = sinkhorn_on_tape(tape, k, iters)?;
    Ok((s, p))
}

/// Standardized, clipped, warm-scaled additive prior for one length.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBias {
    /// `[T, T]`
    pub bias: Tensor,
    pub warm_scale: f64,
    pub clip: f64,
    pub tau_att: f64,
}

/// Recorded prior inputs that may carry gradients.
#[derive(Clone, Copy, Debug)]
pub struct BiasVars {
    /// Attention temperature (scalar).
    pub tau_att: Var,
    /// Distance-penalty strength (scalar), clamped at zero before use.
    pub pos_beta: Var,
}

/// Intermediate matrices of one prior construction, for inspection.
#[derive(Clone, Debug)]
pub struct RpaTrace {
    pub basis: PositionalBasis,
    pub scores: Var,
    pub plan: Var,
    /// Raw (pre-standardization) prior, `[T, T]`.
    pub raw: Var,
    /// Final prior, `[T, T]`.
    pub bias: Var,
}

/// Records the aligned prior for memberships `mu` (`[B, T, R]`).
pub fn rpa_bias_on_tape(
    tape: &mut Tape,
    mu: Var,
    cfg: &RpaConfig,
    vars: BiasVars,
    scale: f64,
) -> Result<RpaTrace> {
    cfg.validate()?;
    let ms = tape.shape(mu).to_vec();
    if ms.len() != 3 || ms[1] == 0 {
        return Err(Error::shape("rpa_bias", format!("mu {ms:?}")));
    }
    let (batch, len, regimes) = (ms[0], ms[1], ms[2]);
    let basis = soft_blocks(len, cfg.blocks_for(regimes))?;
    let phi = tape.constant(basis.phi.clone());
    let (scores, plan) = align_on_tape(
        tape,
        mu,
        phi,
        cfg.tau_align,
        cfg.sinkhorn_iters,
        cfg.detach_scores,
    )?;
    // mean_b (mu_b P) Phi^T, averaging before the second contraction
    let mp = tape.contract(mu, plan, "btr,rk->btk")?;
    let mp = tape.sum_axis(mp, 0)?;
    let mp = tape.reshape(mp, &[len, basis.phi.dim(1)])?;
    let mp = tape.scale(mp, 1.0 / batch as f64);
    let mut raw = tape.contract(mp, phi, "sk,tk->st")?;
    if cfg.posmix > 0.0 {
        let pos = distance_penalty(tape, vars.pos_beta, len)?;
        let a = tape.scale(raw, 1.0 - cfg.posmix);
        let b = tape.scale(pos, cfg.posmix);
        raw = tape.add(a, b)?;
    }
    let z = znorm_on_tape(tape, raw)?;
    let bias = finish_bias(tape, z, cfg.clip, cfg.tau_max, vars.tau_att, scale)?;
    Ok(RpaTrace {
        basis,
        scores,
        plan,
        raw,
        bias,
    })
}

fn distance_penalty(tape: &mut Tape, pos_beta: Var, len: usize) -> Result<Var> {
    let beta = tape.clamp_min(pos_beta, 0.0);
    let beta = tape.neg(beta);
    let dist = tape.constant(pos_distance(len));
    tape.mul(beta, dist)
}

/// `(x - mean) / (std + 1e-6)` over all entries (unbiased std).
pub fn znorm_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let (m, sd) = tape.mean_std(x);
    let c = tape.sub(x, m)?;
    let d = tape.add_scalar(sd, STD_GUARD);
    tape.div(c, d)
}

/// Plain global z-score with the `+1e-6` guard on the unbiased std.
pub fn znorm(x: &Tensor) -> Tensor {
    let m = x.mean();
    let sd = x.std_unbiased();
    x.map(|v| (v - m) / (sd + STD_GUARD))
}

fn finish_bias(
    tape: &mut Tape,
    z: Var,
    clip: f64,
    tau_max: f64,
    tau_att: Var,
    scale: f64,
) -> Result<Var> {
    let z = tape.nan_to_num(z, 0.0, clip, -clip);
    let tau = tape.clamp(tau_att, BIAS_TAU_MIN, tau_max);
    let b = tape.div(z, tau)?;
    let b = tape.clamp(b, -clip, clip);
    Ok(tape.scale(b, scale.clamp(0.0, 1.0)))
}

/// Plain construction of the aligned prior at training step `step`.
pub fn rpa_bias(
    mu: &MembershipTensor,
    cfg: &RpaConfig,
    tau_att: f64,
    step: usize,
) -> Result<PriorBias> {
    let warm = warm_in(step, cfg.warm_steps);
    let mut tape = Tape::new();
    let m = tape.constant(mu.tensor().clone());
    let vars = BiasVars {
        tau_att: tape.scalar(tau_att),
        pos_beta: tape.scalar(DEFAULT_POS_BETA),
    };
    let tr = rpa_bias_on_tape(&mut tape, m, cfg, vars, warm)?;
    Ok(PriorBias {
        bias: tape.value(tr.bias).clone(),
        warm_scale: warm,
        clip: cfg.clip,
        tau_att,
    })
}

/// Records the non-aligned prior: a `sigmoid(kappa)` blend of the z-scored
/// batch-mean membership similarity `mu mu^T` and the distance penalty.
pub fn legacy_bias_on_tape(
    tape: &mut Tape,
    mu: Var,
    vars: BiasVars,
    kappa: Var,
    clip: f64,
    tau_max: f64,
    scale: f64,
) -> Result<Var> {
    let ms = tape.shape(mu).to_vec();
    if ms.len() != 3 || ms[1] == 0 {
        return Err(Error::shape("legacy_bias", format!("mu {ms:?}")));
    }
    let (batch, len) = (ms[0], ms[1]);
    let pos = distance_penalty(tape, vars.pos_beta, len)?;
    let sim = tape.contract(mu, mu, "btr,bsr->ts")?;
    let sim = tape.scale(sim, 1.0 / batch as f64);
    let sim = znorm_on_tape(tape, sim)?;
    let w = tape.sigmoid(kappa);
    let a = tape.mul(w, sim)?;
    let one_minus = tape.neg(w);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let b = tape.mul(one_minus, pos)?;
    let curve = tape.add(a, b)?;
    finish_bias(tape, curve, clip, tau_max, vars.tau_att, scale)
}

/// Plain evaluation of the non-aligned prior.
pub fn legacy_bias(
    mu: &MembershipTensor,
    pos_beta: f64,
    kappa: f64,
    tau_att: f64,
    clip: f64,
    tau_max: f64,
) -> Result<PriorBias> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.tensor().clone());
    let vars = BiasVars {
        tau_att: tape.scalar(tau_att),
        pos_beta: tape.scalar(pos_beta),
    };
    let k = tape.scalar(kappa);
    let b = legacy_bias_on_tape(&mut tape, m, vars, k, clip, tau_max, 1.0)?;
    Ok(PriorBias {
        bias: tape.value(b).clone(),
        warm_scale: 1.0,
        clip,
        tau_att,
    })
}

/// Attention under a prior: `softmax(z + log pi)`, the maximizer of
/// `a.z - KL(a || pi)` over the simplex.
pub fn kl_map_attention(z: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
    if z.len() != prior.len() || z.is_empty() {
        return Err(Error::shape(
            "kl_map_attention",
            format!("{} logits vs {} prior entries", z.len(), prior.len()),
        ));
    }
    if let Some(j) = prior.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::arg(
            "prior",
            format!("entry {j} is {} (must be strictly positive)", prior[j]),
        ));
    }
    let mut out: Vec<f64> = z.iter().zip(prior).map(|(&a, &p)| a + math::ln(p)).collect();
    crate::tensor::softmax_in_place(&mut out);
    Ok(out)
}

/// Row sums of `A A^T` for an alignment with row marginals `1/N` and
/// column marginals `1/K` (each checked to `tol`).
pub fn row_sum_check(a: &Tensor, tol: f64) -> Result<Vec<f64>> {
    if a.rank() != 2 || a.is_empty() {
        return Err(Error::shape("row_sum_check", format!("{:?}", a.shape())));
    }
    let (n, k) = (a.dim(0), a.dim(1));
    let d = a.data();
    let want_row = 1.0 / n as f64;
    let want_col = 1.0 / k as f64;
    let (worst_row, row_sum) = (0..n)
        .map(|i| (i, d[i * k..(i + 1) * k].iter().sum::<f64>()))
        .max_by(|x, y| {
            math::abs(x.1 - want_row).total_cmp(&math::abs(y.1 - want_row))
        })
        .unwrap();
    if !(math::abs(row_sum - want_row) <= tol) {
        return Err(Error::Marginal {
            axis: "row",
            index: worst_row,
            sum: row_sum,
            expected: want_row,
        });
    }
    let (worst_col, col_sum) = (0..k)
        .map(|j| (j, (0..n).map(|i| d[i * k + j]).sum::<f64>()))
        .max_by(|x, y| {
            math::abs(x.1 - want_col).total_cmp(&math::abs(y.1 - want_col))
        })
        .unwrap();
    if !(math::abs(col_sum - want_col) <= tol) {
        return Err(Error::Marginal {
            axis: "column",
            index: worst_col,
            sum: col_sum,
            expected: want_col,
        });
    }
    let aat = contract(a, a, "ik,jk->ij")?;
    Ok(aat.data().chunks(n).map(|r| r.iter().sum()).collect())
}

/// Evaluation-time store of priors keyed by `(block, T)` and valid for one
/// parameter fingerprint. Any fingerprint change empties it.
#[derive(Clone, Debug, Default)]
pub struct BiasCache {
    fingerprint: Option<u64>,
    entries: BTreeMap<(usize, usize), Tensor>,
    hits: u64,
    misses: u64,
}

impl BiasCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop entries built for a different parameter snapshot.
    pub fn sync(&mut self, fingerprint: u64) {
        if self.fingerprint != Some(fingerprint) {
            self.entries.clear();
            self.fingerprint = Some(fingerprint);
        }
    }

    pub fn get(&mut self, block: usize, len: usize) -> Option<&Tensor> {
        let hit = self.entries.get(&(block, len));
        if hit.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        hit
    }

    pub fn insert(&mut self, block: usize, len: usize, bias: Tensor) {
        self.entries.insert((block, len), bias);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &Tensor)> {
        self.entries.iter()
    }
}
