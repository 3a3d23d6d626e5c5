//! Gain-aware controller for the attention temperature and two penalty
//! weights.
//!
//! A small diagonal-Gaussian policy reads a 4-vector (gate delta,
//! saturation fraction, membership entropy, validation CE) once per
//! validation event and emits three bounded nudges. It is trained with
//! REINFORCE on a shaped validation reward and never runs at inference.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 3;
pub const HIDDEN: usize = 64;
pub const TAU_STEP: f64 = 0.03;
pub const LAMBDA_STEP: f64 = 0.01;
pub const OVERSHOOT_PULL: f64 = 0.10;
pub const TAU_FLOOR: f64 = 0.3;
pub const LAMBDA_DELTA_MAX: f64 = 1.0;
pub const LAMBDA_SAT_MAX: f64 = 0.6;
const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardianState {
    /// Change of the mean residual-gate activation since the last event.
    pub gate_delta: f64,
    pub sat_frac: f64,
    pub mu_entropy: f64,
    pub val_loss: f64,
}

impl GuardianState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.gate_delta, self.sat_frac, self.mu_entropy, self.val_loss]
    }
}

/// Raw (pre-scaling) policy output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardianAction {
    pub dtau: f64,
    pub dlambda_delta: f64,
    pub dlambda_sat: f64,
}

impl GuardianAction {
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [self.dtau, self.dlambda_delta, self.dlambda_sat]
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        Self {
            dtau: a[0],
            dlambda_delta: a[1],
            dlambda_sat: a[2],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct PolicyIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    wm: ParamId,
    bm: ParamId,
    log_std: ParamId,
}

/// Two tanh layers of width 64 to the action mean, plus a free log-std.
#[derive(Clone, Debug)]
pub struct GuardianPolicy {
    store: ParamStore,
    ids: PolicyIds,
}

impl GuardianPolicy {
    pub fn new(rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let mut lin = |store: &mut ParamStore, name: &str, shape: &[usize], fan: usize| {
            store.add(name, fan_in_uniform(shape, fan, rng))
        };
        let w1 = lin(&mut store, "body.0.weight", &[STATE_DIM, HIDDEN], STATE_DIM);
        let b1 = lin(&mut store, "body.0.bias", &[HIDDEN], STATE_DIM);
        let w2 = lin(&mut store, "body.2.weight", &[HIDDEN, HIDDEN], HIDDEN);
        let b2 = lin(&mut store, "body.2.bias", &[HIDDEN], HIDDEN);
        let wm = lin(&mut store, "mean.weight", &[HIDDEN, ACTION_DIM], HIDDEN);
        let bm = lin(&mut store, "mean.bias", &[ACTION_DIM], HIDDEN);
        let log_std = store.add("log_std", Tensor::zeros(&[ACTION_DIM]));
        Self {
            store,
            ids: PolicyIds {
                w1,
                b1,
                w2,
                b2,
                wm,
                bm,
                log_std,
            },
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn record_mean(&self, tape: &mut Tape, state: &GuardianState) -> Result<(Var, Var)> {
        let s = tape.constant(Tensor::new(&[1, STATE_DIM], state.to_array().to_vec())?);
        let p = |tape: &mut Tape, id| self.store.leaf(tape, id);
        let (w1, b1, w2, b2) = (
            p(tape, self.ids.w1),
            p(tape, self.ids.b1),
            p(tape, self.ids.w2),
            p(tape, self.ids.b2),
        );
        let (wm, bm, ls) = (p(tape, self.ids.wm), p(tape, self.ids.bm), p(tape, self.ids.log_std));
        let h = tape.matmul(s, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add(h, b2)?;
        let h = tape.tanh(h);
        let m = tape.matmul(h, wm)?;
        let m = tape.add(m, bm)?;
        Ok((m, ls))
    }

    /// Action mean and standard deviation.
    pub fn mean_std(&self, state: &GuardianState) -> Result<([f64; ACTION_DIM], [f64; ACTION_DIM])> {
        let mut tape = Tape::new();
        let (m, ls) = self.record_mean(&mut tape, state)?;
        let mut mean = [0.0; ACTION_DIM];
        let mut std = [0.0; ACTION_DIM];
        mean.copy_from_slice(tape.value(m).data());
        for (s, &l) in std.iter_mut().zip(tape.value(ls).data()) {
            *s = math::exp(l);
        }
        Ok((mean, std))
    }

    /// Records `log pi(action | state)` with the action held fixed.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut Tape,
        state: &GuardianState,
        action: &GuardianAction,
    ) -> Result<Var> {
        let (m, ls) = self.record_mean(tape, state)?;
        let a = tape.constant(Tensor::new(&[1, ACTION_DIM], action.to_array().to_vec())?);
        let diff = tape.sub(a, m)?;
        let std = tape.exp(ls);
        let std = tape.add_scalar(std, STD_EPS);
        let z = tape.div(diff, std)?;
        let z2 = tape.square(z);
        let two_ls = tape.scale(ls, 2.0);
        let t = tape.add(z2, two_ls)?;
        let t = tape.add_scalar(t, math::LN_2PI);
        let s = tape.sum(t);
        Ok(tape.scale(s, -0.5))
    }

    pub fn log_prob(&self, state: &GuardianState, action: &GuardianAction) -> Result<f64> {
        let mut tape = Tape::new();
        let lp = self.log_prob_on_tape(&mut tape, state, action)?;
        Ok(tape.value(lp).item())
    }

    /// `a = mean + std * eps` and its log-density.
    pub fn sample(&self, state: &GuardianState, rng: &mut Rng) -> Result<(GuardianAction, f64)> {
        let (m, s) = self.mean_std(state)?;
        let mut a = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            a[i] = m[i] + s[i] * rng.normal();
        }
        let action = GuardianAction::from_array(a);
        let lp = gaussian_log_prob(&a, &m, &s);
        Ok((action, lp))
    }

    /// Score-function gradient `reward * grad log pi(action | state)` per
    /// parameter, in store order.
    pub fn score_gradient(
        &self,
        state: &GuardianState,
        action: &GuardianAction,
        reward: f64,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let lp = self.log_prob_on_tape(&mut tape, state, action)?;
        let g = tape.backward(lp)?;
        Ok(self
            .store
            .iter()
            .map(|(id, _, v)| {
                g.param(id)
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
                    .map(|x| x * reward)
            })
            .collect())
    }
}

/// Diagonal Gaussian log-density with the policy's `std + 1e-8` guard.
pub fn gaussian_log_prob(a: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(std)
        .map(|((&a, &m), &s)| {
            let z = (a - m) / (s + STD_EPS);
            -0.5 * (z * z + 2.0 * math::ln(s) + math::LN_2PI)
        })
        .sum()
}

/// Constants of the shaped reward
/// `-ce + lambda1 (ce_prev - ce)_+ + lambda2 sigmoid((center - ce) / width)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub zone_center: f64,
    pub zone_width: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            zone_center: 0.0,
            zone_width: 1.0,
        }
    }
}

impl RewardConfig {
    /// Zone sigmoid centered on a helpful CE band `[lo, hi]`.
    pub fn with_zone(mut self, lo: f64, hi: f64) -> Self {
        self.zone_center = 0.5 * (lo + hi);
        self.zone_width = f64::max(0.5 * (hi - lo), 1e-6);
        self
    }
}

pub fn shaped_reward(ce: f64, ce_prev: f64, cfg: &RewardConfig) -> f64 {
    let gain = f64::max(ce_prev - ce, 0.0);
    let width = f64::max(cfg.zone_width, 1e-12);
    -ce + cfg.lambda1 * gain + cfg.lambda2 * math::sigmoid((cfg.zone_center - ce) / width)
}

/// Linear ramp of the controller gain over the first `frac` of epochs.
pub fn beta_ramp(epoch: usize, total_epochs: usize, frac: f64) -> f64 {
    let span = frac * total_epochs as f64;
    if span <= 0.0 {
        return 1.0;
    }
    f64::min(1.0, epoch as f64 / span)
}

/// One projected temperature move: `tau + 0.03 beta dtau`, pulled back by a
/// tenth of any overshoot above `tau_max`, then clamped to `[0.3, tau_max]`.
pub fn apply_tau_step(tau: f64, dtau: f64, beta: f64, tau_max: f64) -> f64 {
    let t = tau + TAU_STEP * beta * dtau;
    let over = f64::max(t - tau_max, 0.0);
    (t - OVERSHOOT_PULL * over).clamp(TAU_FLOOR, tau_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardianConfig {
    pub enable: bool,
    pub lr: f64,
    pub tau_max: f64,
    /// Fraction of epochs over which the gain ramps from 0 to 1.
    pub ramp_frac: f64,
    pub reward: RewardConfig,
}

impl Default for GuardianConfig {
    fn default() -> Self {
        Self {
            enable: true,
            lr: 1e-3,
            tau_max: 1.6,
            ramp_frac: 0.1,
            reward: RewardConfig::default(),
        }
    }
}

/// Controls in force after a controller event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardianDecision {
    pub action: Option<GuardianAction>,
    pub log_prob: Option<f64>,
    pub tau_att: f64,
    pub lambda_delta: f64,
    pub lambda_sat: f64,
}

#[derive(Clone, Debug)]
pub struct Guardian {
    cfg: GuardianConfig,
    policy: GuardianPolicy,
    opt: AdamW,
    lambda_delta: f64,
    lambda_sat: f64,
    beta: f64,
    last: Option<(GuardianState, GuardianAction)>,
    mutations: u64,
}

impl Guardian {
    pub fn new(cfg: GuardianConfig, rng: &mut Rng) -> Self {
        let policy = GuardianPolicy::new(rng);
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            policy.params(),
        );
        Self {
            cfg,
            policy,
            opt,
            lambda_delta: 0.0,
            lambda_sat: 0.0,
            beta: 1.0,
            last: None,
            mutations: 0,
        }
    }

    pub fn config(&self) -> &GuardianConfig {
        &self.cfg
    }

    pub fn enabled(&self) -> bool {
        self.cfg.enable
    }

    pub fn policy(&self) -> &GuardianPolicy {
        &self.policy
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta.clamp(0.0, 1.0);
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lambda_delta(&self) -> f64 {
        self.lambda_delta
    }

    pub fn lambda_sat(&self) -> f64 {
        self.lambda_sat
    }

    /// Number of events that changed controller or model state.
    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    /// Samples an action and applies it to every block temperature in `taus`.
    /// When disabled nothing is sampled and nothing changes.
    pub fn step(
        &mut self,
        state: &GuardianState,
        taus: &mut [f64],
        rng: &mut Rng,
    ) -> Result<GuardianDecision> {
        if !self.cfg.enable {
            return Ok(self.decision(None, None, taus));
        }
        if !state.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("guardian state"));
        }
        let (a, lp) = self.policy.sample(state, rng)?;
        self.last = Some((*state, a));
        for t in taus.iter_mut() {
            *t = apply_tau_step(*t, a.dtau, self.beta, self.cfg.tau_max);
        }
        self.lambda_delta =
            (self.lambda_delta + LAMBDA_STEP * self.beta * a.dlambda_delta).clamp(0.0, LAMBDA_DELTA_MAX);
        self.lambda_sat =
            (self.lambda_sat + LAMBDA_STEP * self.beta * a.dlambda_sat).clamp(0.0, LAMBDA_SAT_MAX);
        self.mutations += 1;
        Ok(self.decision(Some(a), Some(lp), taus))
    }

    fn decision(
        &self,
        action: Option<GuardianAction>,
        log_prob: Option<f64>,
        taus: &[f64],
    ) -> GuardianDecision {
        let tau = if taus.is_empty() {
            0.0
        } else {
            taus.iter().sum::<f64>() / taus.len() as f64
        };
        GuardianDecision {
            action,
            log_prob,
            tau_att: tau,
            lambda_delta: self.lambda_delta,
            lambda_sat: self.lambda_sat,
        }
    }

    /// One Adam step on `-log pi(a_last) * reward`. Returns whether an
    /// update happened (it does not without a prior sample or when disabled).
    pub fn update(&mut self, reward: f64) -> Result<bool> {
        if !self.cfg.enable {
            return Ok(false);
        }
        let Some((state, action)) = self.last else {
            return Ok(false);
        };
        let g = self.policy.score_gradient(&state, &action, reward)?;
        let grads: Vec<Option<Tensor>> = g.into_iter().map(|t| Some(t.map(|x| -x))).collect();
        self.opt.step(self.policy.params_mut(), &grads, self.cfg.lr);
        self.mutations += 1;
        Ok(true)
    }
}

/// Inputs of the scripted temperature baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTau {
    pub tau_min: f64,
    pub tau_max: f64,
    pub warm: usize,
    pub total: usize,
    pub floor: f64,
    /// CE threshold below which over-tightening is guarded against.
    pub zone: f64,
    /// Minimum improvement that counts as progress.
    pub gate: f64,
    pub nudge: f64,
}

impl ScriptedTau {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::arg("floor", "must lie in (0, 1)"));
        }
        if self.warm >= self.total {
            return Err(Error::arg("warm", "must be shorter than the run"));
        }
        Ok(())
    }

    /// Warm-in then cosine-to-floor, without the nudge.
    pub fn base(&self, t: usize) -> f64 {
        let span = self.tau_max - self.tau_min;
        if t <= self.warm {
            let w = self.warm.max(1) as f64;
            return self.tau_min + span * (t as f64 / w).min(1.0);
        }
        let u = ((t - self.warm) as f64 / (self.total - self.warm) as f64).min(1.0);
        let c = 0.5 * (1.0 + math::cos(core::f64::consts::PI * u));
        self.tau_min + span * (self.floor + (1.0 - self.floor) * c)
    }

    /// Full schedule: the base value nudged up by `nudge` (capped at
    /// `tau_max`) when validation CE is inside the zone without progress.
    pub fn at(&self, t: usize, val_ce: Option<f64>, improvement: Option<f64>) -> f64 {
        let tau = self.base(t);
        match (val_ce, improvement) {
            (Some(ce), Some(imp)) if ce < self.zone && imp < self.gate => {
                f64::min(tau + self.nudge, self.tau_max)
            }
            _ => tau,
        }
    }
}

/// Monte Carlo estimate of a one-step improvement on `R(tau) = -(tau - tau*)^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub mean: f64,
    pub std_err: f64,
    /// `(2p - 1) alpha |g| - L alpha^2 / 2`
    pub bound: f64,
    /// Largest step for which the bound is nonnegative.
    pub alpha_max: f64,
    pub trials: usize,
}

impl Lemma1Report {
    pub fn within(&self, k: f64) -> bool {
        math::abs(self.mean - self.bound) <= k * self.std_err
    }
}

pub fn lemma1_experiment(
    tau: f64,
    tau_star: f64,
    p: f64,
    alpha: f64,
    trials: usize,
    rng: &mut Rng,
) -> Lemma1Report {
    const L: f64 = 2.0;
    let r = |x: f64| -(x - tau_star) * (x - tau_star);
    let g = -2.0 * (tau - tau_star);
    let sign = if g >= 0.0 { 1.0 } else { -1.0 };
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..trials {
        let delta = if rng.uniform() < p { sign } else { -sign };
        let d = r(tau + alpha * delta) - r(tau);
        s += d;
        s2 += d * d;
    }
    let n = trials.max(1) as f64;
    let mean = s / n;
    let var = f64::max(s2 / n - mean * mean, 0.0) * n / f64::max(n - 1.0, 1.0);
    Lemma1Report {
        mean,
        std_err: math::sqrt(var / n),
        bound: (2.0 * p - 1.0) * alpha * math::abs(g) - 0.5 * L * alpha * alpha,
        alpha_max: 2.0 * (2.0 * p - 1.0) * math::abs(g) / L,
        trials,
    }
}

/// Projected stochastic ascent on a concave surface with step `c / t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau0: f64,
    pub c: f64,
    pub noise: f64,
    pub steps: usize,
}

/// Final iterate of `tau <- clamp(tau + (c/t)(grad(tau) + noise xi))`.
pub fn convergence_experiment(
    cfg: &AscentConfig,
    grad: impl Fn(f64) -> f64,
    rng: &mut Rng,
) -> f64 {
    let mut tau = cfg.tau0.clamp(cfg.tau_min, cfg.tau_max);
    for t in 1..=cfg.steps {
        let g = grad(tau) + cfg.noise * rng.normal();
        tau = (tau + cfg.c / t as f64 * g).clamp(cfg.tau_min, cfg.tau_max);
    }
    tau
}

/// Same iteration, keeping the whole trajectory.
pub fn convergence_trajectory(
    cfg: &AscentConfig,
    grad: impl Fn(f64) -> f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut tau = cfg.tau0.clamp(cfg.tau_min, cfg.tau_max);
    let mut out = vec![tau];
    for t in 1..=cfg.steps {
        let g = grad(tau) + cfg.noise * rng.normal();
        tau = (tau + cfg.c / t as f64 * g).clamp(cfg.tau_min, cfg.tau_max);
        out.push(tau);
    }
    out
}

/// Empirical score-function gradient on the bandit `r(a) = -|a - target|^2`
/// against its closed form
/// `grad E[r] = grad(-|m - target|^2 - sum std^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BanditReport {
    pub estimate: Vec<f64>,
    pub std_err: Vec<f64>,
    pub analytic: Vec<f64>,
}

impl BanditReport {
    /// `|estimate - analytic| / std_err` per coordinate (zero where the
    /// coordinate has no variance and matches).
    pub fn z_scores(&self) -> Vec<f64> {
        self.estimate
            .iter()
            .zip(&self.analytic)
            .zip(&self.std_err)
            .map(|((&e, &a), &s)| {
                if s > 0.0 {
                    math::abs(e - a) / s
                } else if e == a {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }
}

pub fn reinforce_bandit(
    policy: &GuardianPolicy,
    state: &GuardianState,
    target: [f64; ACTION_DIM],
    samples: usize,
    rng: &mut Rng,
) -> Result<BanditReport> {
    let n_params = policy.params().num_scalars();
    let mut sum = vec![0.0; n_params];
    let mut sum2 = vec![0.0; n_params];
    for _ in 0..samples {
        let (a, _) = policy.sample(state, rng)?;
        let r = -a
            .to_array()
            .iter()
            .zip(&target)
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>();
        let g = policy.score_gradient(state, &a, r)?;
        for (i, x) in g.iter().flat_map(|t| t.data().iter()).enumerate() {
            sum[i] += x;
            sum2[i] += x * x;
        }
    }
    let n = samples as f64;
    let estimate: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err = sum2
        .iter()
        .zip(&estimate)
        .map(|(s2, m)| math::sqrt(f64::max(s2 / n - m * m, 0.0) / (n - 1.0).max(1.0)))
        .collect();

    let mut tape = Tape::new();
    let (m, ls) = policy.record_mean(&mut tape, state)?;
    let t = tape.constant(Tensor::new(&[1, ACTION_DIM], target.to_vec())?);
    let d = tape.sub(m, t)?;
    let d2 = tape.square(d);
    let var = tape.scale(ls, 2.0);
    let var = tape.exp(var);
    let a = tape.sum(d2);
    let b = tape.sum(var);
    let obj = tape.add(a, b)?;
    let obj = tape.neg(obj);
    let g = tape.backward(obj)?;
    let analytic = policy
        .params()
        .iter()
        .flat_map(|(id, _, v)| {
            g.param(id)
                .unwrap_or_else(|| Tensor::zeros(v.shape()))
                .into_data()
        })
        .collect();
    Ok(BanditReport {
        estimate,
        std_err,
        analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> GuardianState {
        GuardianState {
            gate_delta: 0.01,
            sat_frac: 0.2,
            mu_entropy: 1.1,
            val_loss: 2.5,
        }
    }

    #[test]
    fn log_prob_at_mean_is_normalizer() {
        let p = GuardianPolicy::new(&mut Rng::new(1));
        let (m, s) = p.mean_std(&state()).unwrap();
        let lp = p.log_prob(&state(), &GuardianAction::from_array(m)).unwrap();
        let want: f64 = s.iter().map(|s| -(s.ln() + 0.5 * math::LN_2PI)).sum();
        assert!((lp - want).abs() < 1e-12);
        assert!((want + 1.5 * math::LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn sampled_log_prob_matches_taped_value() {
        let p = GuardianPolicy::new(&mut Rng::new(2));
        let (a, lp) = p.sample(&state(), &mut Rng::new(3)).unwrap();
        assert!((lp - p.log_prob(&state(), &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tiny_std_samples_the_mean() {
        let mut p = GuardianPolicy::new(&mut Rng::new(2));
        let id = p.params().find("log_std").unwrap();
        *p.params_mut().get_mut(id) = Tensor::full(&[3], -40.0);
        let (m, _) = p.mean_std(&state()).unwrap();
        let (a, _) = p.sample(&state(), &mut Rng::new(9)).unwrap();
        for (x, y) in a.to_array().iter().zip(&m) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_mean_converges() {
        let p = GuardianPolicy::new(&mut Rng::new(4));
        let (m, s) = p.mean_std(&state()).unwrap();
        let mut rng = Rng::new(5);
        let n = 10_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let (a, _) = p.sample(&state(), &mut rng).unwrap();
            for (x, y) in acc.iter_mut().zip(a.to_array()) {
                *x += y / n as f64;
            }
        }
        for i in 0..3 {
            assert!((acc[i] - m[i]).abs() < 3.0 * s[i] / (n as f64).sqrt());
        }
    }

    #[test]
    fn tau_step_arithmetic() {
        assert_eq!(apply_tau_step(1.0, 0.0, 1.0, 1.6), 1.0);
        // 1.65 overshoots by 0.05: pull back 0.005, then clamp to 1.6
        let over: f64 = 1.6 + 0.05;
        let pulled: f64 = over - 0.10 * 0.05;
        assert!((pulled - 1.645).abs() < 1e-12);
        assert_eq!(apply_tau_step(over, 0.0, 1.0, 1.6), 1.6);
        assert_eq!(apply_tau_step(0.31, -5.0, 1.0, 1.6), 0.3);
        assert!((apply_tau_step(1.0, 1.0, 0.5, 1.6) - 1.015).abs() < 1e-15);
    }

    #[test]
    fn disabled_guardian_changes_nothing() {
        let cfg = GuardianConfig {
            enable: false,
            ..Default::default()
        };
        let mut g = Guardian::new(cfg, &mut Rng::new(1));
        let before = g.policy().params().fingerprint();
        let mut taus = [0.7, 0.9];
        let mut rng = Rng::new(2);
        let probe = rng.clone().next_u64();
        let d = g.step(&state(), &mut taus, &mut rng).unwrap();
        assert_eq!(taus, [0.7, 0.9]);
        assert_eq!(d.action, None);
        assert!((d.tau_att - 0.8).abs() < 1e-15);
        assert!(!g.update(3.0).unwrap());
        assert_eq!(g.policy().params().fingerprint(), before);
        assert_eq!(g.mutations(), 0);
        assert_eq!(rng.next_u64(), probe);
    }

    #[test]
    fn controls_stay_in_bounds() {
        let mut g = Guardian::new(GuardianConfig::default(), &mut Rng::new(1));
        let mut rng = Rng::new(8);
        let mut taus = [0.68; 3];
        for i in 0..500 {
            let s = GuardianState {
                val_loss: 3.0 - i as f64 * 1e-3,
                ..state()
            };
            let d = g.step(&s, &mut taus, &mut rng).unwrap();
            let a = d.action.unwrap();
            assert!(taus.iter().all(|t| (TAU_FLOOR..=1.6).contains(t)));
            assert!((0.0..=1.0).contains(&d.lambda_delta));
            assert!((0.0..=0.6).contains(&d.lambda_sat));
            assert!(a.dtau.is_finite());
            g.update(if i % 2 == 0 { 5.0 } else { -5.0 }).unwrap();
        }
    }

    #[test]
    fn update_without_sample_is_a_no_op() {
        let mut g = Guardian::new(GuardianConfig::default(), &mut Rng::new(1));
        let before = g.policy().params().fingerprint();
        assert!(!g.update(1.0).unwrap());
        assert_eq!(g.policy().params().fingerprint(), before);
    }

    #[test]
    fn zero_reward_gives_zero_gradient() {
        let p = GuardianPolicy::new(&mut Rng::new(1));
        let (a, _) = p.sample(&state(), &mut Rng::new(2)).unwrap();
        let g = p.score_gradient(&state(), &a, 0.0).unwrap();
        assert!(g.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn positive_reward_raises_log_prob() {
        let mut g = Guardian::new(GuardianConfig::default(), &mut Rng::new(1));
        let mut taus = [0.68];
        let d = g.step(&state(), &mut taus, &mut Rng::new(4)).unwrap();
        let a = d.action.unwrap();
        let before = g.policy().log_prob(&state(), &a).unwrap();
        assert!((before - d.log_prob.unwrap()).abs() < 1e-12);
        assert!(g.update(1.0).unwrap());
        let after = g.policy().log_prob(&state(), &a).unwrap();
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn identical_updates_are_reproducible() {
        let run = || {
            let mut g = Guardian::new(GuardianConfig::default(), &mut Rng::new(1));
            let mut rng = Rng::new(2);
            let mut taus = [0.68];
            for r in [0.5, -0.3] {
                g.step(&state(), &mut taus, &mut rng).unwrap();
                g.update(r).unwrap();
            }
            (g.policy().params().fingerprint(), taus)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reward_shape() {
        let no_zone = RewardConfig {
            lambda2: 0.0,
            ..Default::default()
        };
        assert_eq!(shaped_reward(2.0, 1.5, &no_zone), -2.0);
        assert!((shaped_reward(2.0, 2.3, &no_zone) - (-2.0 + 0.3)).abs() < 1e-15);
        let cfg = RewardConfig::default().with_zone(1.0, 3.0);
        let mut prev = f64::NEG_INFINITY;
        for i in (0..200).rev() {
            let r = shaped_reward(0.5 + i as f64 * 0.02, 3.0, &cfg);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn beta_ramps_linearly() {
        assert_eq!(beta_ramp(0, 100, 0.1), 0.0);
        assert_eq!(beta_ramp(5, 100, 0.1), 0.5);
        assert_eq!(beta_ramp(50, 100, 0.1), 1.0);
        assert_eq!(beta_ramp(0, 100, 0.0), 1.0);
    }

    #[test]
    fn scripted_schedule_landmarks() {
        let s = ScriptedTau {
            tau_min: 0.5,
            tau_max: 1.5,
            warm: 100,
            total: 1100,
            floor: 0.1,
            zone: 3.0,
            gate: 0.01,
            nudge: 0.05,
        };
        s.validate().unwrap();
        assert_eq!(s.base(100), 1.5);
        assert!((s.base(50) - 1.0).abs() < 1e-15);
        assert!((s.base(1100) - (0.5 + 0.1)).abs() < 1e-12);
        assert!((s.base(600) - (0.5 + (0.1 + 0.45))).abs() < 1e-12);
        assert!((s.at(600, Some(2.0), Some(0.0)) - (s.base(600) + 0.05)).abs() < 1e-15);
        assert_eq!(s.at(100, Some(2.0), Some(0.0)), 1.5);
        assert_eq!(s.at(600, Some(4.0), Some(0.0)), s.base(600));
        assert_eq!(s.at(600, Some(2.0), Some(0.5)), s.base(600));
        assert!(ScriptedTau { floor: 1.0, ..s }.validate().is_err());
        assert!(ScriptedTau { warm: 1100, ..s }.validate().is_err());
    }

    #[test]
    fn lemma1_limits() {
        let mut rng = Rng::new(1);
        let r = lemma1_experiment(1.0, 0.0, 1.0, 1e-4, 100, &mut rng);
        assert!((r.mean - 2e-4).abs() < 1e-7);
        let r = lemma1_experiment(1.0, 0.0, 0.5, 0.3, 20_000, &mut rng);
        assert!((r.mean + 0.09).abs() < 4.0 * r.std_err);
        assert!(r.mean <= 0.0 + 4.0 * r.std_err);
    }

    #[test]
    fn lemma1_half_bound_is_positive_and_tight() {
        let mut rng = Rng::new(7);
        let alpha = 0.5 * 2.0 * (2.0 * 0.8 - 1.0) * 2.0 / 2.0;
        let r = lemma1_experiment(1.0, 0.0, 0.8, alpha, 10_000, &mut rng);
        assert!((alpha - 0.6).abs() < 1e-15);
        assert!((r.alpha_max - 1.2).abs() < 1e-15);
        assert!((r.bound - 0.36).abs() < 1e-12);
        assert!(r.mean > 0.0);
        assert!(r.within(3.0), "{r:?}");
    }

    #[test]
    fn noiseless_ascent_is_monotone_and_projected() {
        let cfg = AscentConfig {
            tau_min: 0.3,
            tau_max: 1.6,
            tau0: 0.4,
            c: 0.5,
            noise: 0.0,
            steps: 2000,
        };
        let traj = convergence_trajectory(&cfg, |t| -2.0 * (t - 1.0), &mut Rng::new(0));
        assert!(traj.windows(2).all(|w| w[1] >= w[0]));
        assert!((traj.last().unwrap() - 1.0).abs() < 1e-9);
        let edge = convergence_experiment(&cfg, |t| -2.0 * (t - 3.0), &mut Rng::new(0));
        assert_eq!(edge, 1.6);
    }

    #[test]
    fn noisy_ascent_converges_in_most_seeds() {
        let cfg = AscentConfig {
            tau_min: 0.3,
            tau_max: 1.6,
            tau0: 0.3,
            c: 0.5,
            noise: 0.5,
            steps: 100_000,
        };
        let hits = (0..20)
            .filter(|&s| {
                let t = convergence_experiment(&cfg, |t| -2.0 * (t - 1.0), &mut Rng::new(s));
                (t - 1.0).abs() < 0.05
            })
            .count();
        assert!(hits >= 19);
    }

    #[test]
    fn reinforce_is_unbiased_on_a_bandit() {
        let p = GuardianPolicy::new(&mut Rng::new(3));
        let r = reinforce_bandit(&p, &state(), [0.5, -0.2, 0.1], 20_000, &mut Rng::new(4)).unwrap();
        let z = r.z_scores();
        let inside = z.iter().filter(|&&z| z < 3.0).count() as f64 / z.len() as f64;
        assert!(inside > 0.99, "{inside}");
        // output-head coordinates (last 3 + 3 entries: mean bias, log_std)
        for &zi in &z[z.len() - 6..] {
            assert!(zi < 4.0, "{zi}");
        }
    }
}
