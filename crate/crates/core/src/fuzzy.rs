//! Gaussian regime memberships and their diagnostics.
//!
//! Each hidden state `h_t` is projected (`z = h W + b`) and scored against
//! `R` learned centers:
//!
//! `logit_r = clamp(-0.5 * |z - c_r|^2 * clamp(exp(-2 log_sigma_r), 1e-3, 1e3), -30, 30)`
//!
//! and `mu_t = softmax(logit)`, with NaN entries replaced by `1/R`.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{fan_in_uniform, normal_init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LOGIT_CLAMP: f64 = 30.0;
pub const INV_VAR_MIN: f64 = 1e-3;
pub const INV_VAR_MAX: f64 = 1e3;
pub const ENTROPY_EPS: f64 = 1e-8;
pub const DEFAULT_SATURATION_THRESHOLD: f64 = 0.9;

/// Membership parameters as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyParams {
    /// `[D, D]`, applied as `h W`.
    pub proj_weight: Tensor,
    /// `[D]`
    pub proj_bias: Tensor,
    /// `[R, D]`
    pub centers: Tensor,
    /// `[R]`
    pub log_sigma: Tensor,
}

impl FuzzyParams {
    /// Centers `~ N(0, 1/D)`, `log_sigma = 0`, projection with the usual
    /// fan-in uniform initialization.
    pub fn init(d_model: usize, regimes: usize, rng: &mut Rng) -> Result<Self> {
        if regimes == 0 {
            return Err(Error::arg("regimes", "R must be at least 1"));
        }
        Ok(Self {
            proj_weight: fan_in_uniform(&[d_model, d_model], d_model, rng),
            proj_bias: fan_in_uniform(&[d_model], d_model, rng),
            centers: normal_init(&[regimes, d_model], 1.0 / math::sqrt(d_model as f64), rng),
            log_sigma: Tensor::zeros(&[regimes]),
        })
    }

    pub fn regimes(&self) -> usize {
        self.centers.dim(0)
    }

    pub fn register(self, store: &mut ParamStore, prefix: &str) -> FuzzyIds {
        FuzzyIds {
            proj_weight: store.add(format!("{prefix}.proj.weight"), self.proj_weight),
            proj_bias: store.add(format!("{prefix}.proj.bias"), self.proj_bias),
            centers: store.add(format!("{prefix}.centers"), self.centers),
            log_sigma: store.add(format!("{prefix}.log_sigma"), self.log_sigma),
        }
    }
}

/// Where the membership parameters live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuzzyIds {
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub centers: ParamId,
    pub log_sigma: ParamId,
}

/// Membership parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FuzzyVars {
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub centers: Var,
    pub log_sigma: Var,
}

impl FuzzyIds {
    pub fn record(&self, store: &ParamStore, tape: &mut Tape) -> FuzzyVars {
        FuzzyVars {
            proj_weight: store.leaf(tape, self.proj_weight),
            proj_bias: store.leaf(tape, self.proj_bias),
            centers: store.leaf(tape, self.centers),
            log_sigma: store.leaf(tape, self.log_sigma),
        }
    }

    pub fn values(&self, store: &ParamStore) -> FuzzyParams {
        FuzzyParams {
            proj_weight: store.get(self.proj_weight).clone(),
            proj_bias: store.get(self.proj_bias).clone(),
            centers: store.get(self.centers).clone(),
            log_sigma: store.get(self.log_sigma).clone(),
        }
    }
}

/// Per-token regime distributions, shape `[B, T, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipTensor(Tensor);

impl MembershipTensor {
    /// Wraps `mu`, checking that it is rank three with simplex rows.
    pub fn new(mu: Tensor) -> Result<Self> {
        if mu.rank() != 3 || mu.dim(2) == 0 {
            return Err(Error::shape("MembershipTensor", format!("{:?}", mu.shape())));
        }
        let r = mu.dim(2);
        for row in mu.data().chunks(r) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || math::abs(s - 1.0) > 1e-9 {
                return Err(Error::arg("mu", "rows must lie on the simplex"));
            }
        }
        Ok(Self(mu))
    }

    pub fn uniform(batch: usize, len: usize, regimes: usize) -> Self {
        Self(Tensor::full(&[batch, len, regimes], 1.0 / regimes as f64))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn len(&self) -> usize {
        self.0.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn regimes(&self) -> usize {
        self.0.dim(2)
    }

    /// Mean over positions of `-sum_r mu log(max(mu, 1e-8))`.
    pub fn entropy(&self) -> f64 {
        membership_entropy(&self.0)
    }

    pub fn saturation_fraction(&self, threshold: f64) -> f64 {
        saturation_fraction(&self.0, threshold)
    }
}

/// Records the membership computation for `h` (`[B, T, D]`) on `tape`.
pub fn memberships_on_tape(tape: &mut Tape, h: Var, p: &FuzzyVars) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    let cs = tape.shape(p.centers).to_vec();
    if hs.len() != 3 || cs.len() != 2 || cs[1] != hs[2] {
        return Err(Error::shape(
            "memberships",
            format!("h {hs:?} vs centers {cs:?}"),
        ));
    }
    let (b, t, d, r) = (hs[0], hs[1], hs[2], cs[0]);
    if r == 0 {
        return Err(Error::arg("regimes", "R must be at least 1"));
    }
    let z = tape.matmul(h, p.proj_weight)?;
    let z = tape.add(z, p.proj_bias)?;
    let z4 = tape.reshape(z, &[b, t, 1, d])?;
    let diff = tape.sub(z4, p.centers)?; // [B,T,R,D]
    let sq = tape.square(diff);
    let z2 = tape.sum_axis(sq, 3)?;
    let z2 = tape.reshape(z2, &[b, t, r])?;
    let ls = tape.scale(p.log_sigma, -2.0);
    let inv = tape.exp(ls);
    let inv = tape.clamp(inv, INV_VAR_MIN, INV_VAR_MAX);
    let logits = tape.mul(z2, inv)?;
    let logits = tape.scale(logits, -0.5);
    let logits = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let mu = tape.softmax(logits);
    Ok(tape.nan_to_num(mu, 1.0 / r as f64, 1.0, 0.0))
}

/// Plain evaluation of the memberships for `h` (`[B, T, D]`).
pub fn memberships(h: &Tensor, p: &FuzzyParams) -> Result<MembershipTensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let vars = FuzzyVars {
        proj_weight: tape.constant(p.proj_weight.clone()),
        proj_bias: tape.constant(p.proj_bias.clone()),
        centers: tape.constant(p.centers.clone()),
        log_sigma: tape.constant(p.log_sigma.clone()),
    };
    let mu = memberships_on_tape(&mut tape, hv, &vars)?;
    Ok(MembershipTensor(tape.value(mu).clone()))
}

/// Recorded mean membership entropy (scalar).
pub fn entropy_on_tape(tape: &mut Tape, mu: Var) -> Result<Var> {
    let r = tape.shape(mu).len() - 1;
    let safe = tape.clamp_min(mu, ENTROPY_EPS);
    let logs = tape.ln(safe);
    let plogp = tape.mul(mu, logs)?;
    let s = tape.sum_axis(plogp, r)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

/// Mean over positions of `-sum_r mu log(max(mu, 1e-8))` for a `[.., R]` tensor.
pub fn membership_entropy(mu: &Tensor) -> f64 {
    let r = *mu.shape().last().unwrap_or(&1);
    let rows = mu.len() / r.max(1);
    let total: f64 = mu
        .data()
        .chunks(r)
        .map(|row| {
            -row.iter()
                .map(|&p| p * math::ln(p.max(ENTROPY_EPS)))
                .sum::<f64>()
        })
        .sum();
    total / rows.max(1) as f64
}

/// Share of positions whose largest membership reaches `threshold`.
pub fn saturation_fraction(mu: &Tensor, threshold: f64) -> f64 {
    let r = *mu.shape().last().unwrap_or(&1);
    let rows = mu.len() / r.max(1);
    if rows == 0 {
        return 0.0;
    }
    let hits = mu
        .data()
        .chunks(r)
        .filter(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) >= threshold)
        .count();
    hits as f64 / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn params_1d(centers: &[f64], log_sigma: &[f64]) -> FuzzyParams {
        let r = centers.len();
        FuzzyParams {
            proj_weight: Tensor::ones(&[1, 1]),
            proj_bias: Tensor::zeros(&[1]),
            centers: Tensor::new(&[r, 1], centers.to_vec()).unwrap(),
            log_sigma: Tensor::new(&[r], log_sigma.to_vec()).unwrap(),
        }
    }

    #[test]
    fn closed_form_two_regimes() {
        let p = params_1d(&[0.0, 1.0], &[0.0, 0.0]);
        let mu = memberships(&Tensor::zeros(&[1, 1, 1]), &p).unwrap();
        // logits (0, -0.5)
        let e = math::exp(-0.5);
        assert!((mu.tensor().data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((mu.tensor().data()[0] - 0.6225).abs() < 1e-4);
        assert!((mu.tensor().data()[1] - 0.3775).abs() < 1e-4);
    }

    #[test]
    fn identical_centers_give_uniform() {
        let mut rng = Rng::new(5);
        let mut p = FuzzyParams::init(3, 4, &mut rng).unwrap();
        p.centers = Tensor::from_fn(&[4, 3], |i| 0.2 * i[1] as f64);
        let h = normal_init(&[2, 5, 3], 1.0, &mut rng);
        let mu = memberships(&h, &p).unwrap();
        assert!(mu.tensor().data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_regime_is_certain() {
        let mut rng = Rng::new(1);
        let p = FuzzyParams::init(4, 1, &mut rng).unwrap();
        let h = normal_init(&[2, 3, 4], 3.0, &mut rng);
        let mu = memberships(&h, &p).unwrap();
        assert!(mu.tensor().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_regimes_rejected() {
        let mut rng = Rng::new(1);
        assert!(FuzzyParams::init(4, 0, &mut rng).is_err());
        let mut p = FuzzyParams::init(2, 1, &mut rng).unwrap();
        p.centers = Tensor::zeros(&[0, 2]);
        p.log_sigma = Tensor::zeros(&[0]);
        assert!(memberships(&Tensor::zeros(&[1, 1, 2]), &p).is_err());
    }

    #[test]
    fn huge_inputs_stay_on_simplex() {
        let mut rng = Rng::new(9);
        let p = FuzzyParams::init(6, 4, &mut rng).unwrap();
        for scale in [1.0, 1e3, 1e6] {
            let h = normal_init(&[2, 4, 6], scale, &mut rng);
            let mu = memberships(&h, &p).unwrap();
            assert!(MembershipTensor::new(mu.into_tensor()).is_ok());
        }
    }

    #[test]
    fn entropy_values() {
        let u = Tensor::full(&[1, 3, 4], 0.25);
        assert!((membership_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let mut one = Tensor::zeros(&[1, 2, 4]);
        one.set(&[0, 0, 1], 1.0);
        one.set(&[0, 1, 3], 1.0);
        assert!(membership_entropy(&one).abs() < 1e-7);
        let p = Tensor::new(&[1, 1, 2], vec![0.9, 0.1]).unwrap();
        let h = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((membership_entropy(&p) - h).abs() < 1e-12);
        assert!((h - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn saturation_counts() {
        let u = Tensor::full(&[2, 2, 4], 0.25);
        assert_eq!(saturation_fraction(&u, 0.9), 0.0);
        let mut mixed = u.clone();
        for t in 0..2 {
            for r in 0..4 {
                mixed.set(&[0, t, r], if r == 2 { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(saturation_fraction(&mixed, 0.9), 0.5);
        let mut all = Tensor::zeros(&[1, 3, 4]);
        for t in 0..3 {
            all.set(&[0, t, 0], 1.0);
        }
        assert_eq!(saturation_fraction(&all, 0.9), 1.0);
    }

    #[test]
    fn tape_entropy_matches_plain() {
        let mut rng = Rng::new(2);
        let p = FuzzyParams::init(3, 3, &mut rng).unwrap();
        let mu = memberships(&normal_init(&[2, 3, 3], 1.0, &mut rng), &p).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(mu.tensor().clone());
        let h = entropy_on_tape(&mut tape, v).unwrap();
        assert!((tape.value(h).item() - mu.entropy()).abs() < 1e-14);
    }
}
