//! Verification suites: each compares a library routine against an
//! independent oracle or a known statistical outcome.

use std::time::Instant;

use rpa_core::game::{self, ContextMixture};
use rpa_core::guardian::{self, AscentConfig};
use rpa_core::model::{gradient_check, Model, ModelConfig};
use rpa_core::rpa;
use rpa_core::{Rng, Tape, Tensor};
use serde::Serialize;

use crate::error::{LabError, Result};

pub const SUITES: &[&str] = &["klmap", "sinkhorn", "rowsum", "shift", "grad", "lemma1", "theorem2", "nash"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub pass: bool,
    pub cases: usize,
    /// Worst observed error or the suite's summary statistic.
    pub measured: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

/// Runs one suite, or every suite for `all`.
pub fn run(name: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    if name == "all" {
        return SUITES.iter().map(|s| run_suite(s, seed)).collect();
    }
    Ok(vec![run_suite(name, seed)?])
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed).derive(name);
    let t0 = Instant::now();
    let mut r = match name {
        "klmap" => klmap(&mut rng)?,
        "sinkhorn" => sinkhorn(&mut rng)?,
        "rowsum" => rowsum(&mut rng)?,
        "shift" => shift(&mut rng)?,
        "grad" => grad(&mut rng)?,
        "lemma1" => lemma1(&mut rng),
        "theorem2" => theorem2(seed),
        "nash" => nash()?,
        other => {
            return Err(LabError::config(format!(
                "unknown suite {other:?}; available: {}, all",
                SUITES.join(", ")
            )))
        }
    };
    r.seconds = t0.elapsed().as_secs_f64();
    let budget = match name {
        "klmap" => Some(30.0),
        "grad" => Some(120.0),
        "theorem2" => Some(60.0),
        _ => None,
    };
    if let Some(b) = budget {
        if r.seconds >= b {
            r.pass = false;
            r.detail = format!("{}; exceeded {b} s budget", r.detail);
        }
    }
    Ok(r)
}

fn report(suite: &str, cases: usize, measured: f64, tolerance: f64, pass: bool, detail: String) -> SuiteReport {
    SuiteReport {
        suite: suite.into(),
        pass,
        cases,
        measured,
        tolerance,
        seconds: 0.0,
        detail,
    }
}

/// Maximizer of `a.z - KL(a || pi)` over the simplex by projected Newton
/// ascent in the tangent space, with a positivity-preserving backtrack.
pub fn kl_map_oracle(z: &[f64], pi: &[f64]) -> Vec<f64> {
    let n = z.len();
    let obj = |a: &[f64]| -> f64 {
        a.iter()
            .zip(z)
            .zip(pi)
            .map(|((a, z), p)| a * z - a * (a / p).ln())
            .sum()
    };
    let mut a = vec![1.0 / n as f64; n];
    for _ in 0..500 {
        // Hessian of the objective is diag(-1/a); the constrained Newton
        // direction is a * (g - <a, g>).
        let g: Vec<f64> = (0..n).map(|j| z[j] - (a[j] / pi[j]).ln() - 1.0).collect();
        let ag: f64 = a.iter().zip(&g).map(|(a, g)| a * g).sum();
        let d: Vec<f64> = (0..n).map(|j| a[j] * (g[j] - ag)).collect();
        if d.iter().map(|x| x.abs()).fold(0.0, f64::max) < 1e-16 {
            break;
        }
        let f0 = obj(&a);
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = a.iter().zip(&d).map(|(a, d)| a + step * d).collect();
            if cand.iter().all(|&c| c > 0.0) && obj(&cand) >= f0 {
                let s: f64 = cand.iter().sum();
                a = cand.iter().map(|c| c / s).collect();
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return a;
            }
        }
    }
    a
}

fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|w| w / s).collect()
}

fn klmap(rng: &mut Rng) -> Result<SuiteReport> {
    let cases = 1000;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = 2 + rng.below(5);
        let z: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let pi = random_simplex(n, rng);
        let got = rpa::kl_map_attention(&z, &pi)?;
        let want = kl_map_oracle(&z, &pi);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    let tol = 1e-6;
    Ok(report("klmap", cases, worst, tol, worst < tol, format!("max |softmax(z + log pi) - oracle| = {worst:.3e}")))
}

fn positive(n: usize, k: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[n, k], |_| (1.5 * rng.normal()).exp())
}

fn sinkhorn(rng: &mut Rng) -> Result<SuiteReport> {
    let cases = 100;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let x = Tensor::from_fn(&[8, 8], |_| 1.0 - rng.uniform());
        let s = rpa::sinkhorn(&x, 50)?;
        let d = s.data();
        for i in 0..8 {
            worst = worst.max((d[i * 8..(i + 1) * 8].iter().sum::<f64>() - 1.0).abs());
            worst = worst.max(((0..8).map(|r| d[r * 8 + i]).sum::<f64>() - 1.0).abs());
        }
    }
    let tol = 1e-6;
    Ok(report("sinkhorn", cases, worst, tol, worst < tol, format!("max marginal error after 50 rounds = {worst:.3e}")))
}

fn rowsum(rng: &mut Rng) -> Result<SuiteReport> {
    let cases = 100;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, k) = (1 + rng.below(8), 1 + rng.below(8));
        let rows = vec![1.0 / n as f64; n];
        let cols = vec![1.0 / k as f64; k];
        let a = rpa::sinkhorn_marginals(&positive(n, k, rng), &rows, &cols, 1e-15, 100_000)?;
        let sums = rpa::row_sum_check(&a, 1e-12)?;
        let want = 1.0 / (n * k) as f64;
        for s in sums {
            worst = worst.max((s - want).abs());
        }
    }
    let tol = 1e-9;
    Ok(report("rowsum", cases, worst, tol, worst < tol, format!("max |rowsum(A A^T) - 1/(NK)| = {worst:.3e}")))
}

/// `softmax(causal(scores + bias)) V` on the tape, as in attention.
fn attend(scores: &Tensor, bias: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let b = tape.constant(bias.clone());
    let v = tape.constant(v.clone());
    let x = tape.add(s, b)?;
    let x = tape.causal_mask(x)?;
    let p = tape.softmax(x);
    let o = tape.matmul(p, v)?;
    Ok(tape.value(o).clone())
}

/// Dyadic scores and shifts keep every intermediate exact, so outputs must
/// agree bit for bit.
fn shift(rng: &mut Rng) -> Result<SuiteReport> {
    let cases = 100;
    let mut failures = 0;
    for _ in 0..cases {
        let t = 2 + rng.below(7);
        let dyadic = |rng: &mut Rng, den: f64| (rng.below(128) as f64 - 64.0) / den;
        let scores = Tensor::from_fn(&[t, t], |_| dyadic(rng, 16.0));
        let bias = Tensor::from_fn(&[t, t], |_| dyadic(rng, 32.0));
        let v = Tensor::from_fn(&[t, 4], |_| rng.normal());
        let c: Vec<f64> = (0..t).map(|_| dyadic(rng, 8.0)).collect();
        let shifted = Tensor::from_fn(&[t, t], |i| scores.at(i) + c[i[0]]);
        let a = attend(&scores, &bias, &v)?;
        let b = attend(&shifted, &bias, &v)?;
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            failures += 1;
        }
    }
    Ok(report(
        "shift",
        cases,
        failures as f64,
        0.0,
        failures == 0,
        format!("{failures} of {cases} cases differ in any bit"),
    ))
}

fn grad(rng: &mut Rng) -> Result<SuiteReport> {
    let cfg = ModelConfig::gradcheck();
    let (batch, len, v) = (2, 4, cfg.vocab);
    let m = Model::new(cfg, rng.next_u64())?;
    let x: Vec<usize> = (0..batch * len).map(|_| rng.below(v)).collect();
    let y: Vec<usize> = (0..batch * len).map(|_| rng.below(v)).collect();
    let r = gradient_check(&m, &x, &y, batch, len, 1e-5, 1e-6)?;
    let tol = 1e-3;
    let all = r.scalars == m.params().num_scalars();
    Ok(report(
        "grad",
        r.scalars,
        r.max_rel_err,
        tol,
        r.max_rel_err < tol && all,
        format!(
            "{} tensors, {} scalars; worst relative error {:.3e} at {}",
            r.params.len(),
            r.scalars,
            r.max_rel_err,
            r.worst
        ),
    ))
}

fn lemma1(rng: &mut Rng) -> SuiteReport {
    let (tau, tau_star, p) = (1.0, 0.0, 0.8);
    let probe = guardian::lemma1_experiment(tau, tau_star, p, 0.0, 0, rng);
    let alpha = 0.5 * probe.alpha_max;
    let r = guardian::lemma1_experiment(tau, tau_star, p, alpha, 10_000, rng);
    let gap = (r.mean - r.bound).abs();
    report(
        "lemma1",
        r.trials,
        gap / r.std_err,
        3.0,
        r.mean > 0.0 && r.within(3.0),
        format!(
            "alpha {alpha}: mean gain {:.5} +- {:.5}, bound {:.5}",
            r.mean, r.std_err, r.bound
        ),
    )
}

/// Ascent on `-(tau - 1)^2` over `[0.3, 1.6]` with unit-variance-scaled
/// noise; counts seeds that finish within 0.05 of the optimum.
pub fn theorem2_hits(seed: u64, seeds: u64, steps: usize) -> usize {
    let cfg = AscentConfig {
        tau_min: 0.3,
        tau_max: 1.6,
        tau0: 0.3,
        c: 0.5,
        noise: 0.5,
        steps,
    };
    let root = Rng::new(seed).derive("theorem2");
    (0..seeds)
        .filter(|&s| {
            let t = guardian::convergence_experiment(&cfg, |t| -2.0 * (t - 1.0), &mut root.derive_indexed("seed", s));
            (t - 1.0).abs() < 0.05
        })
        .count()
}

fn theorem2(seed: u64) -> SuiteReport {
    let hits = theorem2_hits(seed, 100, 100_000);
    report(
        "theorem2",
        100,
        hits as f64,
        95.0,
        hits >= 95,
        format!("{hits} of 100 seeds end within 0.05 of the optimum after 1e5 steps"),
    )
}

fn nash() -> Result<SuiteReport> {
    let cands = [256, 512, 1024];
    let mut m = ContextMixture::new(&cands, 0.5)?;
    let mut reached = None;
    for round in 1..=200 {
        m.update(&[-2.0, -1.0, -2.0])?;
        if reached.is_none() && m.probabilities()[1] > 0.99 {
            reached = Some(round);
        }
    }
    let q0 = [0.2, 0.3, 0.5];
    let mut e = ContextMixture::with_weights(&cands, &q0, 0.5)?;
    let mut rng = Rng::new(0).derive("nash.equal");
    for _ in 0..200 {
        let u = 4.0 * rng.normal();
        e.update(&[u; 3])?;
    }
    let drift = q0.iter().zip(e.probabilities()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (a, b) = ([0.0, 0.2, 0.1], [1.0, 2.0, 1.5]);
    let (q_star, _) = game::congestion_equilibrium(&a, &b)?;
    let played = game::play_congestion(&a, &b, 0.5, 2000)?;
    let gap = q_star
        .iter()
        .zip(played.probabilities())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let pass = reached.is_some() && drift < 1e-12 && gap < 1e-9;
    Ok(report(
        "nash",
        3,
        drift,
        1e-12,
        pass,
        format!(
            "dominant context above 0.99 after {} rounds; equal-utility drift {drift:.1e}; congestion equilibrium gap {gap:.1e}",
            reached.map_or("never".to_string(), |r| r.to_string())
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_is_the_closed_form() {
        let z = [0.3, -1.2, 2.0];
        let pi = [0.5, 0.25, 0.25];
        let a = kl_map_oracle(&z, &pi);
        let w: Vec<f64> = z.iter().zip(&pi).map(|(z, p)| p * f64::exp(*z)).collect();
        let s: f64 = w.iter().sum();
        for (x, y) in a.iter().zip(&w) {
            assert!((x - y / s).abs() < 1e-12);
        }
    }

    #[test]
    fn cheap_suites_pass() {
        for s in ["klmap", "sinkhorn", "rowsum", "shift", "lemma1", "nash"] {
            let r = run_suite(s, 0).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn unknown_suite_lists_the_choices() {
        let e = run("nope", 0).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("theorem2"));
    }
}
