use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rpa_lab::ablate;
use rpa_lab::checkpoint::Checkpoint;
use rpa_lab::config::PRESETS;
use rpa_lab::metrics::{JsonlWriter, MemorySink};
use rpa_lab::train::{self, Trainer};
use rpa_lab::{verify, LabError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "rpa-lab", version, about = "Train, evaluate and verify prior-biased attention models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.jsonl and checkpoint.bin to the output directory.
    Train {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset instead of a config file.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["val", "test"])]
        split: String,
    },
    /// Run a verification suite (or `all`).
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print one JSON object per suite.
        #[arg(long)]
        json: bool,
    },
    /// Staged ablation over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "baseline,align,guardian,swa")]
        stages: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        preset: String,
        /// Write the full report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print each block's prior for length T as CSV.
    DumpPrior {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "T", id = "T")]
        t: usize,
    },
    /// Print a preset as TOML.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

fn base_config(config: Option<&Path>, preset: Option<&str>) -> Result<RunConfig> {
    match (config, preset) {
        (Some(p), _) => RunConfig::load(p),
        (None, Some(name)) => RunConfig::preset(name),
        (None, None) => Err(LabError::config(format!(
            "pass --config PATH or --preset NAME ({})",
            PRESETS.join(", ")
        ))),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Returns whether everything checked passed.
fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train {
            config,
            preset,
            deterministic,
            seed,
            out,
        } => {
            let mut cfg = base_config(config.as_deref(), preset.as_deref())?;
            cfg.deterministic |= deterministic;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            cfg.validate()?;
            let trainer = Trainer::new(cfg.clone())?;
            let outcome = match &cfg.output_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
                    let mut sink = JsonlWriter::create(&dir.join("metrics.jsonl"))?;
                    let o = trainer.run(&mut sink)?;
                    o.checkpoint.save(&dir.join("checkpoint.bin"))?;
                    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
                    o
                }
                None => {
                    let mut sink = MemorySink::default();
                    let o = trainer.run(&mut sink)?;
                    print!("{}", sink.text());
                    o
                }
            };
            for e in &outcome.epochs {
                eprintln!("epoch {:>3}  step {:>6}  val CE {:.4}  tau {:.3}", e.epoch, e.step, e.val_ce, e.tau_att);
            }
            eprintln!(
                "final ({} weights): val CE {:.4} (ppl {:.3}), test CE {:.4} (ppl {:.3})",
                outcome.weights.as_str(),
                outcome.final_val.ce,
                outcome.final_val.ce.exp(),
                outcome.final_test.ce,
                outcome.final_test.ce.exp()
            );
            Ok(true)
        }
        Cmd::Eval { ckpt, split } => {
            let c = Checkpoint::load(&ckpt)?;
            let (w, r) = train::eval_checkpoint(&c, &split)?;
            let v = serde_json::json!({
                "split": split,
                "weights": w.as_str(),
                "ce": r.ce,
                "ppl": r.ce.exp(),
                "tokens": r.tokens,
                "windows": r.windows,
                "attention_calls": r.counters.attention_calls,
                "bias_adds": r.counters.bias_adds,
            });
            println!("{v}");
            Ok(true)
        }
        Cmd::Verify { suite, seed, json } => {
            let reports = verify::run(&suite, seed)?;
            for r in &reports {
                if json {
                    println!("{}", serde_json::to_string(r).expect("report serializes"));
                } else {
                    println!(
                        "{} {:<9} {:>8.2}s  {}",
                        if r.pass { "PASS" } else { "FAIL" },
                        r.suite,
                        r.seconds,
                        r.detail
                    );
                }
            }
            Ok(reports.iter().all(|r| r.pass))
        }
        Cmd::Ablate {
            stages,
            seeds,
            config,
            preset,
            report,
        } => {
            let base = base_config(config.as_deref(), Some(&preset))?;
            let r = ablate::run_ablation(&base, &stages, &seeds, &mut |l| eprintln!("{l}"))?;
            for s in &r.stages {
                println!("{:<9} median val CE {:.4}", s.stage, s.median_val_ce);
            }
            for c in &r.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{:.1} s for {} stages x {} seeds", r.seconds, r.stages.len(), seeds.len());
            if let Some(p) = report {
                write_file(&p, &serde_json::to_string_pretty(&r).expect("report serializes"))?;
            }
            Ok(r.passed())
        }
        Cmd::DumpPrior { ckpt, t } => {
            let c = Checkpoint::load(&ckpt)?;
            print!("{}", train::prior_csv(&c, t)?);
            Ok(true)
        }
        Cmd::Config { preset } => {
            print!("{}", RunConfig::preset(&preset)?.to_toml());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
