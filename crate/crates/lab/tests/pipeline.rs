use std::process::Command;

use rpa_lab::ablate::stage_config;
use rpa_lab::checkpoint::Checkpoint;
use rpa_lab::metrics::{read_jsonl, JsonlWriter, MemorySink};
use rpa_lab::train::{self, Trainer};
use rpa_lab::RunConfig;

fn tiny() -> RunConfig {
    RunConfig::preset("tiny").unwrap()
}

#[test]
fn checkpoint_reload_reproduces_final_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = Trainer::new(tiny()).unwrap().run(&mut MemorySink::default()).unwrap();
    let path = dir.path().join("c.bin");
    out.checkpoint.save(&path).unwrap();
    let c = Checkpoint::load(&path).unwrap();
    let (w, val) = train::eval_checkpoint(&c, "val").unwrap();
    assert_eq!(w, out.weights);
    assert_eq!(val.ce.to_bits(), out.final_val.ce.to_bits());
    let (_, test) = train::eval_checkpoint(&c, "test").unwrap();
    assert_eq!(test.ce.to_bits(), out.final_test.ce.to_bits());
}

#[test]
fn metrics_file_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let cfg = tiny();
    {
        let mut sink = JsonlWriter::create(&path).unwrap();
        Trainer::new(cfg.clone()).unwrap().run(&mut sink).unwrap();
    }
    let (header, recs) = read_jsonl(&path).unwrap();
    assert_eq!(header["kind"], "header");
    assert_eq!(header["seed"], cfg.seed);
    assert!(recs.iter().any(|r| r.kind == "train"));
    assert_eq!(recs.iter().filter(|r| r.kind == "val").count(), cfg.epochs);
    for r in &recs {
        assert!(r.ce.is_finite() && r.ce > 0.0);
        assert!(r.sat_frac >= 0.0 && r.sat_frac <= 1.0);
    }
}

#[test]
fn disabled_controller_never_mutates() {
    let epoch = |lr: f64, ramp: f64| {
        let mut cfg = stage_config(&tiny(), "align", None).unwrap();
        cfg.deterministic = true;
        cfg.guardian.lr = lr;
        cfg.guardian.ramp_frac = ramp;
        let mut t = Trainer::new(cfg).unwrap();
        t.run_epoch(&mut MemorySink::default()).unwrap();
        t.probe()
    };
    let a = epoch(0.05, 0.1);
    let b = epoch(0.5, 0.0);
    assert_eq!(a.guardian_mutations, 0);
    assert_eq!(a, b);
}

#[test]
fn eval_window_cap_is_respected() {
    let mut cfg = tiny();
    cfg.eval_windows = 3;
    let t = Trainer::new(cfg).unwrap();
    let (_, r) = t.eval_split("val").unwrap();
    assert_eq!(r.windows, 3);
    assert_eq!(r.tokens, 3 * t.config().model.max_len);
}

#[test]
fn different_seeds_diverge() {
    let run = |seed| {
        let mut cfg = tiny();
        cfg.seed = seed;
        cfg.deterministic = true;
        let mut sink = MemorySink::default();
        Trainer::new(cfg).unwrap().run(&mut sink).unwrap();
        sink.text()
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn prior_dump_has_one_row_per_entry() {
    let out = Trainer::new(tiny()).unwrap().run(&mut MemorySink::default()).unwrap();
    let csv = train::prior_csv(&out.checkpoint, 5).unwrap();
    let layers = out.checkpoint.config.model.layers;
    assert_eq!(csv.lines().count(), 1 + layers * 25);
    assert!(train::prior_csv(&out.checkpoint, 0).is_err());
}

fn cli(args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_rpa-lab")).args(args).output().unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stdout).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, toml) = cli(&["config", "--preset", "tiny"]);
    assert_eq!(code, 0);
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, toml).unwrap();
    let run_dir = dir.path().join("run");
    let (code, _) = cli(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--deterministic",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let ckpt = run_dir.join("checkpoint.bin");
    assert!(run_dir.join("metrics.jsonl").exists());
    let (code, out) = cli(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--split", "test"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["ce"].as_f64().unwrap().is_finite());
    assert_eq!(cli(&["dump-prior", "--ckpt", ckpt.to_str().unwrap(), "--T", "4"]).0, 0);
    assert_eq!(cli(&["verify", "nash"]).0, 0);
    assert_eq!(cli(&["verify", "nope"]).0, 2);
    assert_eq!(cli(&["train", "--config", "/no/such/file.toml"]).0, 2);
    assert_eq!(cli(&["config", "--preset", "nope"]).0, 2);
    assert_eq!(cli(&["ablate", "--stages", "nope", "--preset", "tiny"]).0, 2);
    std::fs::write(dir.path().join("bad.bin"), b"garbage").unwrap();
    let bad = dir.path().join("bad.bin");
    assert_eq!(cli(&["eval", "--ckpt", bad.to_str().unwrap()]).0, 2);
}

#[test]
fn shipped_configs_match_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk", "full", "ablation", "tiny"] {
        let loaded = RunConfig::load(&dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(loaded.to_toml(), RunConfig::preset(name).unwrap().to_toml(), "{name}");
    }
}
