//! Replicator dynamics over candidate training context lengths.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

/// Log-weights are kept within this distance of the maximum so that no
/// context ever loses all of its mass.
pub const LOG_WEIGHT_FLOOR: f64 = -600.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub eta: f64,
    pub lambda_sat: f64,
    pub sat0: f64,
    pub lambda_h: f64,
    pub h_max: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            lambda_sat: 1.0,
            sat0: 0.9,
            lambda_h: 0.2,
            h_max: core::f64::consts::LN_2 * 2.0,
        }
    }
}

impl GameConfig {
    /// Sets `h_max = ln R`.
    pub fn for_regimes(mut self, regimes: usize) -> Self {
        self.h_max = math::ln(regimes.max(2) as f64);
        self
    }
}

/// `-ce - lambda_s [sat - s0]_+ + lambda_h H / H_max`
pub fn utility(ce: f64, sat: f64, entropy: f64, cfg: &GameConfig) -> Result<f64> {
    if !(cfg.h_max > 0.0) {
        return Err(Error::arg("h_max", "must be positive"));
    }
    if !(ce.is_finite() && sat.is_finite() && entropy.is_finite()) {
        return Err(Error::NonFinite("utility input"));
    }
    Ok(-ce - cfg.lambda_sat * f64::max(sat - cfg.sat0, 0.0) + cfg.lambda_h * entropy / cfg.h_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextMixture {
    candidates: Vec<usize>,
    log_weights: Vec<f64>,
    q: Vec<f64>,
    eta: f64,
}

impl ContextMixture {
    /// Uniform mixture over `candidates`.
    pub fn new(candidates: &[usize], eta: f64) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::arg("candidates", "must not be empty"));
        }
        if candidates.contains(&0) {
            return Err(Error::arg("candidates", "context lengths must be positive"));
        }
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::arg("eta", "must be finite and nonnegative"));
        }
        let n = candidates.len();
        Ok(Self {
            candidates: candidates.to_vec(),
            log_weights: vec![0.0; n],
            q: vec![1.0 / n as f64; n],
            eta,
        })
    }

    /// Mixture with the given initial probabilities.
    pub fn with_weights(candidates: &[usize], q: &[f64], eta: f64) -> Result<Self> {
        let mut m = Self::new(candidates, eta)?;
        if q.len() != candidates.len() || q.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::arg("q", "must be strictly positive, one entry per candidate"));
        }
        m.log_weights = q.iter().map(|&p| math::ln(p)).collect();
        m.renormalize();
        Ok(m)
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.q
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn renormalize(&mut self) {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for w in &mut self.log_weights {
            *w = f64::max(*w - max, LOG_WEIGHT_FLOOR);
        }
        let z: f64 = self.log_weights.iter().map(|&w| math::exp(w)).sum();
        for (p, &w) in self.q.iter_mut().zip(&self.log_weights) {
            *p = math::exp(w) / z;
        }
    }

    /// `log_w += eta u`, `q = softmax(log_w)`.
    pub fn update(&mut self, utilities: &[f64]) -> Result<()> {
        if utilities.len() != self.len() {
            return Err(Error::arg("utilities", "one entry per candidate"));
        }
        if utilities.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFinite("utilities"));
        }
        for (w, &u) in self.log_weights.iter_mut().zip(utilities) {
            *w += self.eta * u;
        }
        self.renormalize();
        Ok(())
    }

    /// Categorical draw of a context length.
    pub fn sample(&self, rng: &mut Rng) -> usize {
        self.candidates[rng.categorical(&self.q)]
    }

    /// `max_c u_c - sum_c q_c u_c`; zero exactly at a best response.
    pub fn exploitability(&self, utilities: &[f64]) -> f64 {
        let avg: f64 = self.q.iter().zip(utilities).map(|(q, u)| q * u).sum();
        utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max) - avg
    }
}

/// Interior equilibrium of the congestion game `u_c(q) = a_c - b_c q_c`,
/// where all supported utilities equal a common value `v`.
pub fn congestion_equilibrium(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64)> {
    if a.len() != b.len() || a.is_empty() || b.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::arg("b", "must be positive, one per a"));
    }
    let inv: f64 = b.iter().map(|b| 1.0 / b).sum();
    let v = (a.iter().zip(b).map(|(a, b)| a / b).sum::<f64>() - 1.0) / inv;
    let q: Vec<f64> = a.iter().zip(b).map(|(a, b)| (a - v) / b).collect();
    if q.iter().any(|&p| p <= 0.0) {
        return Err(Error::arg("a", "equilibrium is not interior"));
    }
    Ok((q, v))
}

/// Runs the replicator update on `u_c(q) = a_c - b_c q_c` from the uniform
/// mixture.
pub fn play_congestion(a: &[f64], b: &[f64], eta: f64, rounds: usize) -> Result<ContextMixture> {
    let cands: Vec<usize> = (1..=a.len()).collect();
    let mut m = ContextMixture::new(&cands, eta)?;
    for _ in 0..rounds {
        let u: Vec<f64> = a
            .iter()
            .zip(b)
            .zip(m.probabilities())
            .map(|((a, b), q)| a - b * q)
            .collect();
        m.update(&u)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sums_to_one(q: &[f64]) -> bool {
        (q.iter().sum::<f64>() - 1.0).abs() < 1e-12 && q.iter().all(|&p| p > 0.0)
    }

    #[test]
    fn utility_examples() {
        let cfg = GameConfig {
            h_max: 2.0,
            ..Default::default()
        };
        let u = utility(1.0, 0.95, 1.0, &cfg).unwrap();
        assert!((u - (-0.95)).abs() < 1e-12);
        assert_eq!(utility(1.0, 0.5, 0.0, &cfg).unwrap(), -1.0);
        let plain = GameConfig {
            lambda_sat: 0.0,
            lambda_h: 0.0,
            ..cfg
        };
        assert_eq!(utility(2.5, 1.0, 1.3, &plain).unwrap(), -2.5);
        assert!(utility(1.0, 0.5, 0.5, &GameConfig { h_max: 0.0, ..cfg }).is_err());
        assert!(utility(f64::NAN, 0.5, 0.5, &cfg).is_err());
    }

    #[test]
    fn equal_utilities_and_zero_step_leave_q() {
        let mut m = ContextMixture::with_weights(&[256, 512, 1024], &[0.2, 0.3, 0.5], 0.5).unwrap();
        let q0 = m.probabilities().to_vec();
        m.update(&[-1.7; 3]).unwrap();
        for (a, b) in q0.iter().zip(m.probabilities()) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut z = ContextMixture::with_weights(&[256, 512], &[0.4, 0.6], 0.0).unwrap();
        z.update(&[3.0, -9.0]).unwrap();
        assert!((z.probabilities()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn better_context_takes_over() {
        let mut m = ContextMixture::new(&[256, 512, 1024], 0.5).unwrap();
        for _ in 0..200 {
            m.update(&[-2.0, -1.0, -2.0]).unwrap();
        }
        // ratio e^{100} against each rival
        let want = 1.0 / (1.0 + 2.0 * (-100.0f64).exp());
        assert!((m.probabilities()[1] - want).abs() < 1e-12);
        assert!(m.probabilities()[1] > 0.99);
        assert!(sums_to_one(m.probabilities()));
    }

    #[test]
    fn mass_never_vanishes() {
        let mut m = ContextMixture::new(&[1, 2, 3], 0.5).unwrap();
        for _ in 0..100_000 {
            m.update(&[10.0, -10.0, 0.0]).unwrap();
        }
        assert!(sums_to_one(m.probabilities()));
    }

    #[test]
    fn bad_inputs() {
        assert!(ContextMixture::new(&[], 0.5).is_err());
        assert!(ContextMixture::new(&[0, 4], 0.5).is_err());
        assert!(ContextMixture::new(&[4], -1.0).is_err());
        let mut m = ContextMixture::new(&[4, 8], 0.5).unwrap();
        assert!(m.update(&[1.0]).is_err());
        assert!(m.update(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sampling() {
        let one = ContextMixture::with_weights(&[256, 512], &[1.0, 1e-300], 0.5).unwrap();
        let mut rng = Rng::new(1);
        assert!((0..1000).all(|_| one.sample(&mut rng) == 256));

        let half = ContextMixture::new(&[384, 768], 0.5).unwrap();
        let n = 100_000;
        let hits = (0..n).filter(|_| half.sample(&mut rng) == 384).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);

        let draw = |s| {
            let mut r = Rng::new(s);
            (0..50).map(|_| half.sample(&mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn congestion_games_reach_their_equilibria() {
        for (a, b) in [
            (vec![1.0, 0.5], vec![1.0, 1.0]),
            (vec![0.0, 0.2, 0.1], vec![1.0, 2.0, 1.5]),
        ] {
            let (q_star, v) = congestion_equilibrium(&a, &b).unwrap();
            let u_star: Vec<f64> = a.iter().zip(&b).zip(&q_star).map(|((a, b), q)| a - b * q).collect();
            assert!(u_star.iter().all(|u| (u - v).abs() < 1e-12));
            let m = play_congestion(&a, &b, 0.5, 2000).unwrap();
            for (p, s) in m.probabilities().iter().zip(&q_star) {
                assert!((p - s).abs() < 1e-9, "{p} vs {s}");
            }
            // the equilibrium is stationary, anything else moves
            let mut at = ContextMixture::with_weights(m.candidates(), &q_star, 0.5).unwrap();
            at.update(&u_star).unwrap();
            for (p, s) in at.probabilities().iter().zip(&q_star) {
                assert!((p - s).abs() < 1e-12);
            }
            assert!(at.exploitability(&u_star).abs() < 1e-12);
            let mut off = ContextMixture::new(m.candidates(), 0.5).unwrap();
            let u: Vec<f64> = a.iter().zip(&b).zip(off.probabilities()).map(|((a, b), q)| a - b * q).collect();
            let before = off.probabilities().to_vec();
            off.update(&u).unwrap();
            assert!(before.iter().zip(off.probabilities()).any(|(x, y)| (x - y).abs() > 1e-6));
        }
    }

    #[test]
    fn permutation_equivariance() {
        let q = [0.1, 0.6, 0.3];
        let u = [0.4, -1.0, 2.0];
        let perm = [2, 0, 1];
        let mut m = ContextMixture::with_weights(&[1, 2, 3], &q, 0.5).unwrap();
        let qp: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let up: Vec<f64> = perm.iter().map(|&i| u[i]).collect();
        let mut mp = ContextMixture::with_weights(&[3, 1, 2], &qp, 0.5).unwrap();
        m.update(&u).unwrap();
        mp.update(&up).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((mp.probabilities()[k] - m.probabilities()[i]).abs() < 1e-15);
        }
    }
}
