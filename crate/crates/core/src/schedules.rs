//! Late-phase optimization schedules: flat then cosine-to-floor learning
//! rate, parameter EMA, selective SWA, a logistic-map warm-in perturbation
//! and a dropout glide.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DROPOUT_FLOOR: f64 = 0.08;
pub const GLIDE_SPAN: f64 = 0.60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub peak: f64,
    pub flat_frac: f64,
    /// Floor as a fraction of `peak`.
    pub floor: f64,
    pub total: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 3e-3,
            flat_frac: 0.3,
            floor: 0.08,
            total: 1000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(Error::arg("peak", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.flat_frac) {
            return Err(Error::arg("flat_frac", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::arg("floor", "must lie in [0, 1]"));
        }
        if self.total == 0 {
            return Err(Error::arg("total", "must be positive"));
        }
        Ok(())
    }

    pub fn flat_steps(&self) -> f64 {
        self.flat_frac * self.total as f64
    }

    /// Learning rate at step `t` (clamped to `total`).
    pub fn lr_at(&self, t: usize) -> f64 {
        let t = t.min(self.total) as f64;
        let flat = self.flat_steps();
        if t < flat {
            return self.peak;
        }
        let u = (t - flat) / (self.total as f64 - flat);
        let c = 0.5 * (1.0 + math::cos(core::f64::consts::PI * u));
        self.peak * (self.floor + (1.0 - self.floor) * c)
    }
}

/// `shadow <- decay shadow + (1 - decay) params`
pub fn ema_update(shadow: &mut [Tensor], params: &[Tensor], decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::shape("ema", "parameter count differs"));
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        if s.shape() != p.shape() {
            return Err(Error::shape("ema", alloc::format!("{:?} vs {:?}", s.shape(), p.shape())));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Tensor>,
    updates: u64,
}

impl Ema {
    pub fn new(params: &[Tensor], decay: f64) -> Self {
        Self {
            decay,
            shadow: params.to_vec(),
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        ema_update(&mut self.shadow, params, self.decay)?;
        self.updates += 1;
        Ok(())
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwaConfig {
    pub start_epoch: usize,
    pub ce_lo: f64,
    pub ce_hi: f64,
    /// Minimum relative gain over the entry snapshot.
    pub g_min: f64,
}

impl Default for SwaConfig {
    fn default() -> Self {
        Self {
            start_epoch: 0,
            ce_lo: 0.0,
            ce_hi: f64::INFINITY,
            g_min: 0.01,
        }
    }
}

/// Running sum of admitted snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct Swa {
    pub cfg: SwaConfig,
    sum: Option<Vec<Tensor>>,
    count: usize,
}

impl Swa {
    pub fn new(cfg: SwaConfig) -> Self {
        Self {
            cfg,
            sum: None,
            count: 0,
        }
    }

    pub fn admits(&self, epoch: usize, ce: f64, entry_ce: f64) -> bool {
        epoch >= self.cfg.start_epoch
            && ce >= self.cfg.ce_lo
            && ce <= self.cfg.ce_hi
            && entry_ce > 0.0
            && (entry_ce - ce) / entry_ce >= self.cfg.g_min
    }

    /// Adds `params` to the average if the epoch qualifies.
    pub fn consider(&mut self, epoch: usize, ce: f64, entry_ce: f64, params: &[Tensor]) -> Result<bool> {
        if !self.admits(epoch, ce, entry_ce) {
            return Ok(false);
        }
        match &mut self.sum {
            None => self.sum = Some(params.to_vec()),
            Some(sum) => {
                if sum.len() != params.len() || sum.iter().zip(params).any(|(a, b)| a.shape() != b.shape()) {
                    return Err(Error::shape("swa", "snapshot layout differs"));
                }
                for (s, p) in sum.iter_mut().zip(params) {
                    for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                        *a += b;
                    }
                }
            }
        }
        self.count += 1;
        Ok(true)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Arithmetic mean of the admitted snapshots.
    pub fn mean(&self) -> Option<Vec<Tensor>> {
        let n = self.count as f64;
        self.sum
            .as_ref()
            .map(|s| s.iter().map(|t| t.map(|x| x / n)).collect())
    }
}

/// Which weights an evaluation used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalWeights {
    Swa,
    Ema,
    Raw,
}

impl EvalWeights {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalWeights::Swa => "swa",
            EvalWeights::Ema => "ema",
            EvalWeights::Raw => "raw",
        }
    }
}

/// SWA if any snapshot was admitted, else EMA, else the raw weights.
pub fn select_eval_weights<'a>(
    raw: &'a [Tensor],
    ema: Option<&'a Ema>,
    swa_mean: Option<&'a [Tensor]>,
) -> (EvalWeights, &'a [Tensor]) {
    if let Some(m) = swa_mean {
        (EvalWeights::Swa, m)
    } else if let Some(e) = ema {
        (EvalWeights::Ema, e.shadow())
    } else {
        (EvalWeights::Raw, raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChaosConfig {
    pub r: f64,
    pub x0: f64,
    pub amp: f64,
    pub decay: f64,
    /// Fraction of training during which the factor is applied.
    pub active_frac: f64,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        Self {
            r: 3.9,
            x0: 0.721,
            amp: 0.25,
            decay: 5e-4,
            active_frac: 0.2,
        }
    }
}

/// Logistic-map perturbation with an exponentially decaying amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chaos {
    pub cfg: ChaosConfig,
    pub x: f64,
    pub t: u64,
}

impl Chaos {
    pub fn new(cfg: ChaosConfig) -> Self {
        Self { cfg, x: cfg.x0, t: 0 }
    }

    pub fn amplitude(&self) -> f64 {
        self.cfg.amp * math::exp(-self.cfg.decay * self.t as f64)
    }

    /// Advances the map and returns `(1 - a) + a x`.
    pub fn step(&mut self) -> f64 {
        self.x = self.cfg.r * self.x * (1.0 - self.x);
        self.t += 1;
        let a = self.amplitude();
        (1.0 - a) + a * self.x
    }

    /// `1 + extra a`
    pub fn temp(&self, extra: f64) -> f64 {
        1.0 + extra * self.amplitude()
    }
}

/// Decays dropout towards 0.08 over the first 60% of the late phase.
pub fn dropout_glide(base: f64, phase: f64) -> f64 {
    if base < DROPOUT_FLOOR {
        return base;
    }
    let tail = f64::max(0.0, 1.0 - phase / GLIDE_SPAN);
    DROPOUT_FLOOR + (base - DROPOUT_FLOOR) * tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sched() -> LrSchedule {
        LrSchedule {
            peak: 1e-3,
            flat_frac: 0.2,
            floor: 0.08,
            total: 1000,
        }
    }

    #[test]
    fn lr_landmarks() {
        let s = sched();
        s.validate().unwrap();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(199), 1e-3);
        assert!((s.lr_at(200) - 1e-3).abs() < 1e-18);
        assert!((s.lr_at(1000) - 0.08e-3).abs() < 1e-18);
        assert!((s.lr_at(600) - 1e-3 * (0.08 + 0.92 / 2.0)).abs() < 1e-15);
        assert_eq!(s.lr_at(5000), s.lr_at(1000));
    }

    #[test]
    fn lr_is_non_increasing_after_flat_and_floored() {
        let s = sched();
        let lrs: Vec<f64> = (0..=1000).map(|t| s.lr_at(t)).collect();
        assert!(lrs[200..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l >= 0.08e-3 - 1e-18));
    }

    #[test]
    fn lr_rejects_bad_config() {
        assert!(LrSchedule { total: 0, ..sched() }.validate().is_err());
        assert!(LrSchedule { flat_frac: 1.0, ..sched() }.validate().is_err());
        assert!(LrSchedule { peak: 0.0, ..sched() }.validate().is_err());
    }

    #[test]
    fn ema_limits() {
        let p = vec![Tensor::full(&[2], 3.0)];
        let mut s = vec![Tensor::full(&[2], 1.0)];
        ema_update(&mut s, &p, 0.0).unwrap();
        assert_eq!(s[0].data(), &[3.0, 3.0]);
        let mut s = vec![Tensor::full(&[2], 1.0)];
        ema_update(&mut s, &p, 1.0).unwrap();
        assert_eq!(s[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn ema_gap_decays_geometrically() {
        let p = vec![Tensor::full(&[1], 2.0)];
        let mut e = Ema::new(&[Tensor::full(&[1], 0.0)], 0.9);
        for _ in 0..25 {
            e.update(&p).unwrap();
        }
        let gap = 2.0 - e.shadow()[0].item();
        assert!((gap - 2.0 * 0.9f64.powi(25)).abs() < 1e-12);
        assert_eq!(e.updates(), 25);
        assert!(e.update(&[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn swa_selects_and_averages() {
        let mut swa = Swa::new(SwaConfig {
            start_epoch: 2,
            ce_lo: 1.0,
            ce_hi: 3.0,
            g_min: 0.01,
        });
        let a = vec![Tensor::full(&[2], 1.0)];
        let b = vec![Tensor::full(&[2], 4.0)];
        assert!(!swa.consider(1, 2.0, 2.5, &a).unwrap());
        assert!(!swa.consider(3, 3.5, 4.0, &a).unwrap());
        assert!(!swa.consider(3, 0.5, 4.0, &a).unwrap());
        // 0.5% gain under a 1% threshold
        assert!(!swa.consider(3, 1.99, 2.0, &a).unwrap());
        assert!(swa.mean().is_none());
        assert!(swa.consider(3, 1.9, 2.0, &a).unwrap());
        assert!(swa.consider(4, 1.8, 2.0, &b).unwrap());
        assert_eq!(swa.count(), 2);
        assert_eq!(swa.mean().unwrap()[0].data(), &[2.5, 2.5]);
    }

    #[test]
    fn eval_weight_precedence() {
        let raw = vec![Tensor::full(&[1], 1.0)];
        let ema = Ema::new(&[Tensor::full(&[1], 2.0)], 0.9);
        let swa = vec![Tensor::full(&[1], 3.0)];
        assert_eq!(select_eval_weights(&raw, Some(&ema), Some(&swa)).0, EvalWeights::Swa);
        let (w, t) = select_eval_weights(&raw, Some(&ema), None);
        assert_eq!((w, t[0].item()), (EvalWeights::Ema, 2.0));
        assert_eq!(select_eval_weights(&raw, None, None).0, EvalWeights::Raw);
    }

    #[test]
    fn chaos_first_step_and_limits() {
        let mut c = Chaos::new(ChaosConfig::default());
        let f = c.step();
        assert!((c.x - 3.9 * 0.721 * 0.279).abs() < 1e-15);
        assert!((c.x - 0.78452).abs() < 1e-5);
        let a = 0.25 * (-5e-4f64).exp();
        assert!((f - ((1.0 - a) + a * c.x)).abs() < 1e-15);
        assert!((c.temp(0.3) - (1.0 + 0.3 * a)).abs() < 1e-15);

        let mut flat = Chaos::new(ChaosConfig { amp: 0.0, ..Default::default() });
        assert!((0..100).all(|_| flat.step() == 1.0));

        let mut late = Chaos::new(ChaosConfig::default());
        late.t = 100_000;
        assert!((late.step() - 1.0).abs() < 1e-20);
    }

    #[test]
    fn dropout_glide_examples() {
        assert_eq!(dropout_glide(0.2, 0.0), 0.2);
        assert_eq!(dropout_glide(0.2, 0.6), 0.08);
        assert_eq!(dropout_glide(0.2, 0.9), 0.08);
        assert!((dropout_glide(0.09, 0.3) - 0.085).abs() < 1e-15);
        assert_eq!(dropout_glide(0.05, 0.3), 0.05);
    }
}
