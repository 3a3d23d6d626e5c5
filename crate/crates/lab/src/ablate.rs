//! Staged ablation: baseline, then the prior with the context game, then the
//! controller with late-phase schedules, then selective weight averaging.

use std::time::Instant;

use rpa_core::schedules::EvalWeights;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::metrics::NullSink;
use crate::train::{TrainOutcome, Trainer};

pub const STAGES: &[&str] = &["baseline", "align", "guardian", "swa"];

/// Configuration of one stage, layered on `base`. `zone` is the helpful CE
/// band used by the reward and by weight averaging.
pub fn stage_config(base: &RunConfig, stage: &str, zone: Option<(f64, f64)>) -> Result<RunConfig> {
    let mut c = base.clone();
    c.name = format!("{}-{stage}", base.name);
    let s = &mut c.schedule;
    c.model.use_rpa = false;
    c.game.enable = false;
    c.guardian.enable = false;
    s.ema.enable = false;
    s.swa.enable = false;
    s.chaos.enable = false;
    s.dropout_glide = false;
    let level = STAGES
        .iter()
        .position(|&x| x == stage)
        .ok_or_else(|| LabError::config(format!("unknown stage {stage:?}; available: {}", STAGES.join(", "))))?;
    if level >= 1 {
        c.model.use_rpa = true;
        c.game.enable = true;
    }
    if level >= 2 {
        c.guardian.enable = true;
        s.ema.enable = true;
        s.chaos.enable = true;
        s.dropout_glide = true;
        if let Some((lo, hi)) = zone {
            c.guardian.reward = c.guardian.reward.with_zone(lo, hi);
        }
    }
    if level >= 3 {
        s.swa.enable = true;
        if let Some((lo, hi)) = zone {
            s.swa.select.ce_lo = lo;
            s.swa.select.ce_hi = hi;
        }
    }
    c.validate()?;
    Ok(c)
}

/// Helpful band from a baseline trajectory: from half the best CE up to
/// the median epoch CE.
pub fn helpful_zone(trajectories: &[Vec<f64>]) -> Option<(f64, f64)> {
    let mut all: Vec<f64> = trajectories.iter().flatten().copied().filter(|x| x.is_finite()).collect();
    if all.is_empty() {
        return None;
    }
    all.sort_by(f64::total_cmp);
    Some((0.5 * all[0], median_sorted(&all)))
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    median_sorted(&s)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_val_ce: f64,
    pub weights: EvalWeights,
    pub best_raw_ce: f64,
    pub best_admitted_ce: Option<f64>,
    pub swa_count: usize,
    pub trajectory: Vec<f64>,
}

impl SeedResult {
    fn from_outcome(seed: u64, o: &TrainOutcome) -> Self {
        Self {
            seed,
            final_val_ce: o.final_val.ce,
            weights: o.weights,
            best_raw_ce: o.best_raw_ce(),
            best_admitted_ce: o.best_admitted_ce(),
            swa_count: o.epochs.iter().filter(|e| e.swa_admitted).count(),
            trajectory: o.epochs.iter().map(|e| e.val_ce).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageResult {
    pub stage: String,
    pub median_val_ce: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub stages: Vec<StageResult>,
    pub zone: Option<(f64, f64)>,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl AblationReport {
    pub fn stage(&self, name: &str) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs the requested stages (in canonical order) over `seeds`. `progress`
/// receives one line per finished run.
pub fn run_ablation(
    base: &RunConfig,
    stages: &[String],
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    for s in stages {
        if !STAGES.contains(&s.as_str()) {
            return Err(LabError::config(format!("unknown stage {s:?}; available: {}", STAGES.join(", "))));
        }
    }
    if seeds.is_empty() {
        return Err(LabError::config("ablation needs at least one seed"));
    }
    let started = Instant::now();
    let mut results: Vec<StageResult> = Vec::new();
    let mut zone = None;
    for &stage in STAGES.iter().filter(|s| stages.iter().any(|x| x == *s)) {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = stage_config(base, stage, zone)?;
            cfg.seed = seed;
            let out = Trainer::new(cfg)?.run(&mut NullSink)?;
            let r = SeedResult::from_outcome(seed, &out);
            progress(&format!(
                "{stage:<9} seed {seed}: val CE {:.4} ({}, {} averaged)",
                r.final_val_ce,
                r.weights.as_str(),
                r.swa_count
            ));
            per_seed.push(r);
        }
        if stage == "baseline" {
            let traj: Vec<Vec<f64>> = per_seed.iter().map(|r| r.trajectory.clone()).collect();
            zone = helpful_zone(&traj);
        }
        results.push(StageResult {
            stage: stage.into(),
            median_val_ce: median(&per_seed.iter().map(|r| r.final_val_ce).collect::<Vec<_>>()),
            seeds: per_seed,
        });
    }
    let mut report = AblationReport {
        stages: results,
        zone,
        checks: Vec::new(),
        seconds: started.elapsed().as_secs_f64(),
    };
    report.checks = checks(&report);
    Ok(report)
}

fn checks(r: &AblationReport) -> Vec<Check> {
    let mut out = Vec::new();
    if let (Some(b), Some(a)) = (r.stage("baseline"), r.stage("align")) {
        out.push(Check {
            name: "align below baseline".into(),
            pass: a.median_val_ce < b.median_val_ce,
            detail: format!("median val CE {:.4} -> {:.4}", b.median_val_ce, a.median_val_ce),
        });
    }
    if let Some(s) = r.stage("swa") {
        for sr in &s.seeds {
            let (pass, detail) = match sr.best_admitted_ce {
                Some(best) => (
                    sr.weights == EvalWeights::Swa && sr.final_val_ce <= best,
                    format!(
                        "seed {}: averaged CE {:.4} vs best admitted {:.4} ({} snapshots)",
                        sr.seed, sr.final_val_ce, best, sr.swa_count
                    ),
                ),
                None => (false, format!("seed {}: no snapshot admitted", sr.seed)),
            };
            out.push(Check {
                name: format!("averaged weights no worse than best admitted (seed {})", sr.seed),
                pass,
                detail,
            });
        }
    }
    out
}
