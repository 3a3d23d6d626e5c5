//! Training and evaluation loops.

use std::time::Instant;

use rpa_core::game::{self, ContextMixture};
use rpa_core::guardian::{self, Guardian, GuardianState};
use rpa_core::model::{lm_loss, Counters, ForwardCtx, Model};
use rpa_core::optim::{AdamW, AdamWConfig};
use rpa_core::rpa::{warm_in, BiasCache};
use rpa_core::schedules::{dropout_glide, Chaos, Ema, EvalWeights, LrSchedule, Swa};
use rpa_core::{Rng, Tape, Tensor};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::corpus::{eval_chunks, train_chunks, Corpus, Splits};
use crate::error::{LabError, Result};
use crate::metrics::{GuardianRecord, MetricsRecord, MetricsSink};

/// Which windows an evaluation covers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSpec {
    pub context: usize,
    pub batch: usize,
    /// Leading windows to use (all when absent).
    pub max_windows: Option<usize>,
    pub deterministic: bool,
    /// Seed of the routing-noise stream; fixed so repeated passes agree.
    pub seed: u64,
}

impl EvalSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            context: cfg.eval_context,
            batch: cfg.eval_batch,
            max_windows: (cfg.eval_windows > 0).then_some(cfg.eval_windows),
            deterministic: cfg.deterministic,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Unsmoothed cross-entropy per token.
    pub ce: f64,
    pub tokens: usize,
    pub windows: usize,
    pub mu_entropy: f64,
    pub sat_frac: f64,
    pub gate_mean: f64,
    pub tau_att: f64,
    pub counters: Counters,
}

/// Sequential, non-overlapping evaluation with a prior cache shared by all
/// batches of the pass.
pub fn evaluate(model: &Model, ids: &[usize], spec: &EvalSpec) -> Result<EvalReport> {
    let mut windows = eval_chunks(ids, spec.context)?;
    if let Some(m) = spec.max_windows {
        windows.truncate(m.max(1));
    }
    let mut cache = BiasCache::new();
    cache.sync(cache_key(model));
    let mut counters = Counters::default();
    let (mut ce_sum, mut tokens) = (0.0, 0usize);
    let (mut ent, mut sat, mut gate) = (0.0, 0.0, 0.0);
    let rng = Rng::new(spec.seed).derive("eval");
    for (i, chunk) in windows.chunks(spec.batch.max(1)).enumerate() {
        let b = chunk.len();
        let x: Vec<usize> = chunk.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let y: Vec<usize> = chunk.iter().flat_map(|(_, y)| y.iter().copied()).collect();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(rng.derive_indexed("batch", i as u64), spec.deterministic)
            .with_cache(&mut cache);
        let out = model.forward(&mut tape, &x, b, spec.context, &mut ctx)?;
        let parts = lm_loss(&mut tape, &out, &y, model.config(), false, 0.0)?;
        let c = ctx.counters;
        counters.attention_calls += c.attention_calls;
        counters.bias_adds += c.bias_adds;
        counters.bias_builds += c.bias_builds;
        counters.cache_hits += c.cache_hits;
        ce_sum += parts.ce_pure_sum;
        tokens += parts.tokens;
        let w = b as f64;
        ent += w * tape.value(out.mu_entropy).item();
        sat += w * out.mean_sat_frac();
        gate += w * out.mean_gate();
    }
    let n = windows.len() as f64;
    Ok(EvalReport {
        ce: ce_sum / tokens as f64,
        tokens,
        windows: windows.len(),
        mu_entropy: ent / n,
        sat_frac: sat / n,
        gate_mean: gate / n,
        tau_att: mean(&model.taus()),
        counters,
    })
}

/// Evaluates a checkpoint's selected weights on `split` of the corpus its
/// config describes.
pub fn eval_checkpoint(ckpt: &Checkpoint, split: &str) -> Result<(EvalWeights, EvalReport)> {
    let corpus = ckpt.config.load_corpus()?;
    let splits = corpus.split(ckpt.config.data.train_frac, ckpt.config.data.val_frac)?;
    let (w, model) = ckpt.eval_model()?;
    let r = evaluate(&model, splits.get(split)?, &EvalSpec::from_config(&ckpt.config))?;
    Ok((w, r))
}

/// Priors of every block for length `len`, built from the leading
/// validation windows, as CSV rows `block,row,col,value`.
pub fn prior_csv(ckpt: &Checkpoint, len: usize) -> Result<String> {
    let cfg = &ckpt.config;
    if len == 0 || len > cfg.model.max_len {
        return Err(LabError::config(format!("T must lie in 1..={}", cfg.model.max_len)));
    }
    let corpus = cfg.load_corpus()?;
    let splits = corpus.split(cfg.data.train_frac, cfg.data.val_frac)?;
    let mut windows = eval_chunks(&splits.val, len)?;
    windows.truncate(cfg.eval_batch.max(1));
    let x: Vec<usize> = windows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let (_, model) = ckpt.eval_model()?;
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval(Rng::new(cfg.seed).derive("eval"), cfg.deterministic);
    let out = model.forward(&mut tape, &x, windows.len(), len, &mut ctx)?;
    let mut csv = String::from("block,row,col,value\n");
    for (b, p) in out.priors.iter().enumerate() {
        for i in 0..len {
            for j in 0..len {
                csv.push_str(&format!("{b},{i},{j},{}\n", p.at(&[i, j])));
            }
        }
    }
    Ok(csv)
}

fn cache_key(model: &Model) -> u64 {
    model
        .bias_scales()
        .iter()
        .fold(model.params().fingerprint(), |h, s| h.rotate_left(7) ^ s.to_bits())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub ce: f64,
    pub context: usize,
    pub lr: f64,
    pub dropout: f64,
    pub chaos: f64,
    pub bias_scale: f64,
    pub mu_entropy: f64,
    pub sat_frac: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: usize,
    /// Validation CE of the raw weights.
    pub val_ce: f64,
    pub swa_admitted: bool,
    pub tau_att: f64,
    pub q: Option<Vec<f64>>,
    pub reward: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub weights: EvalWeights,
    pub final_val: EvalReport,
    pub final_test: EvalReport,
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    /// Lowest raw validation CE among epochs admitted to the average.
    pub fn best_admitted_ce(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter(|e| e.swa_admitted)
            .map(|e| e.val_ce)
            .min_by(f64::total_cmp)
    }

    pub fn best_raw_ce(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_ce).fold(f64::INFINITY, f64::min)
    }
}

/// Everything that an evaluation pass must leave untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct StateProbe {
    pub step: usize,
    pub fingerprint: u64,
    pub taus: Vec<f64>,
    pub bias_scales: Vec<f64>,
    pub guardian_mutations: u64,
    pub guardian_lambdas: (f64, f64),
    pub game_log_weights: Option<Vec<f64>>,
    pub optimizer_steps: u64,
    pub ema_updates: Option<u64>,
    pub swa_count: Option<usize>,
    pub chaos: Option<(u64, u64)>,
}

pub struct Trainer {
    cfg: RunConfig,
    splits: Splits,
    model: Model,
    opt: AdamW,
    lr: LrSchedule,
    ema: Option<Ema>,
    swa: Option<Swa>,
    guardian: Guardian,
    game: Option<ContextMixture>,
    chaos: Option<Chaos>,
    contexts: Vec<usize>,
    rng_data: Rng,
    rng_ctx: Rng,
    rng_guard: Rng,
    rng_drop: Rng,
    step: usize,
    epoch: usize,
    prev_val: Option<f64>,
    prev_gate: Option<f64>,
    history: Vec<EpochSummary>,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = cfg.load_corpus()?;
        Self::with_corpus(cfg, &corpus)
    }

    pub fn with_corpus(cfg: RunConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.vocab > cfg.model.vocab {
            return Err(LabError::config(format!(
                "corpus vocabulary {} exceeds model.vocab {}",
                corpus.vocab, cfg.model.vocab
            )));
        }
        let splits = corpus.split(cfg.data.train_frac, cfg.data.val_frac)?;
        let longest = cfg.contexts().into_iter().chain([cfg.eval_context]).max().unwrap_or(1);
        for (name, s) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            if s.len() <= longest + 1 {
                return Err(LabError::config(format!(
                    "{name} split has {} tokens, fewer than context {longest} needs",
                    s.len()
                )));
            }
        }
        let root = Rng::new(cfg.seed);
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: cfg.schedule.weight_decay,
                ..AdamWConfig::default()
            },
            model.params(),
        );
        let sch = &cfg.schedule;
        let ema = sch.ema.enable.then(|| Ema::new(model.params().values(), sch.ema.decay));
        let swa = sch.swa.enable.then(|| Swa::new(sch.swa.select));
        let guardian = Guardian::new(cfg.guardian, &mut root.derive("guardian.init"));
        let game = if cfg.game.enable {
            Some(ContextMixture::new(&cfg.game.candidates, cfg.game.params.eta)?)
        } else {
            None
        };
        let chaos = (sch.chaos.enable && !cfg.deterministic).then(|| Chaos::new(sch.chaos.params));
        Ok(Self {
            contexts: cfg.contexts(),
            lr: cfg.lr_schedule(),
            splits,
            model,
            opt,
            ema,
            swa,
            guardian,
            game,
            chaos,
            rng_data: root.derive("train.data"),
            rng_ctx: root.derive("train.context"),
            rng_guard: root.derive("guardian.sample"),
            rng_drop: root.derive("train.dropout"),
            step: 0,
            epoch: 0,
            prev_val: None,
            prev_gate: None,
            history: Vec::new(),
            started: Instant::now(),
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn guardian(&self) -> &Guardian {
        &self.guardian
    }

    pub fn game(&self) -> Option<&ContextMixture> {
        self.game.as_ref()
    }

    pub fn history(&self) -> &[EpochSummary] {
        &self.history
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn probe(&self) -> StateProbe {
        StateProbe {
            step: self.step,
            fingerprint: self.model.params().fingerprint(),
            taus: self.model.taus(),
            bias_scales: self.model.bias_scales().to_vec(),
            guardian_mutations: self.guardian.mutations(),
            guardian_lambdas: (self.guardian.lambda_delta(), self.guardian.lambda_sat()),
            game_log_weights: self.game.as_ref().map(|g| g.log_weights().to_vec()),
            optimizer_steps: self.opt.steps_taken(),
            ema_updates: self.ema.as_ref().map(|e| e.updates()),
            swa_count: self.swa.as_ref().map(|s| s.count()),
            chaos: self.chaos.map(|c| (c.t, c.x.to_bits())),
        }
    }

    fn wall(&self) -> Option<f64> {
        (!self.cfg.deterministic).then(|| self.started.elapsed().as_secs_f64())
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "header",
            "name": self.cfg.name,
            "seed": self.cfg.seed,
            "deterministic": self.cfg.deterministic,
            "params": self.model.params().num_scalars(),
            "splits": {
                "train": self.splits.train.len(),
                "val": self.splits.val.len(),
                "test": self.splits.test.len(),
            },
            "config": serde_json::to_value(&self.cfg).unwrap_or(serde_json::Value::Null),
        })
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let total = self.cfg.total_steps();
        let context = match &self.game {
            Some(g) => g.sample(&mut self.rng_ctx),
            None => self.contexts[0],
        };
        let batch = self.cfg.tokens_per_step / context;
        let b = train_chunks(&self.splits.train, context, batch, &mut self.rng_data)?;
        let base_p = self.cfg.model.dropout;
        let dropout = if self.cfg.schedule.dropout_glide {
            dropout_glide(base_p, self.step as f64 / total as f64)
        } else {
            base_p
        };
        let active = (self.cfg.schedule.chaos.params.active_frac * total as f64) as usize;
        let chaos = match &mut self.chaos {
            Some(c) if self.step < active => c.step(),
            _ => 1.0,
        };
        let lr = self.lr.lr_at(self.step) * chaos;
        let bias_scale = warm_in(self.step, self.cfg.model.rpa.warm_steps) * chaos;
        self.model.set_bias_scale(bias_scale);

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(
            self.rng_drop.derive_indexed("step", self.step as u64),
            dropout,
            self.cfg.deterministic,
        );
        let out = self.model.forward(&mut tape, &b.x, batch, context, &mut ctx)?;
        let parts = lm_loss(&mut tape, &out, &b.y, &self.cfg.model, true, self.guardian.lambda_sat())?;
        let loss = tape.value(parts.loss).item();
        if !loss.is_finite() {
            return Err(LabError::NonFiniteLoss {
                step: self.step,
                epoch: self.epoch,
                context,
                snapshot: format!(
                    "loss={loss} ce_sum={} lr={lr} bias_scale={bias_scale} taus={:?} max|w|={} starts={:?}",
                    parts.ce_pure_sum,
                    self.model.taus(),
                    self.model.params().values().iter().map(Tensor::max_abs).fold(0.0, f64::max),
                    &b.starts[..b.starts.len().min(8)],
                ),
            });
        }
        let grads = tape.backward(parts.loss)?;
        let mut g = self.model.params().collect_grads(&grads);
        let cap = self.cfg.schedule.grad_clip;
        let grad_norm = clip_global_norm(&mut g, if cap > 0.0 { cap } else { f64::INFINITY });
        self.opt.step(self.model.params_mut(), &g, lr);
        if let Some(e) = &mut self.ema {
            e.update(self.model.params().values())?;
        }
        let report = StepReport {
            step: self.step,
            ce: parts.ce(),
            context,
            lr,
            dropout,
            chaos,
            bias_scale,
            mu_entropy: tape.value(out.mu_entropy).item(),
            sat_frac: out.mean_sat_frac(),
            grad_norm,
        };
        self.step += 1;
        Ok(report)
    }

    /// Validation, controller event, game update and average selection.
    pub fn end_epoch(&mut self, sink: &mut dyn MetricsSink) -> Result<EpochSummary> {
        let spec = EvalSpec::from_config(&self.cfg);
        let val = evaluate(&self.model, &self.splits.val, &spec)?;
        let ce = val.ce;
        let entry = self.prev_val.unwrap_or(ce);

        let state = GuardianState {
            gate_delta: self.prev_gate.map_or(0.0, |g| val.gate_mean - g),
            sat_frac: val.sat_frac,
            mu_entropy: val.mu_entropy,
            val_loss: ce,
        };
        self.guardian.set_beta(guardian::beta_ramp(
            self.epoch,
            self.cfg.epochs,
            self.cfg.guardian.ramp_frac,
        ));
        let mut taus = self.model.taus();
        let decision = self.guardian.step(&state, &mut taus, &mut self.rng_guard)?;
        let mut reward = None;
        if self.guardian.enabled() {
            self.model.set_taus(&taus);
            let r = guardian::shaped_reward(ce, entry, &self.cfg.guardian.reward);
            self.guardian.update(r)?;
            reward = Some(r);
        }

        let q = match &mut self.game {
            Some(g) => {
                let mut u = Vec::with_capacity(self.contexts.len());
                for &c in &self.contexts {
                    let probe = evaluate(
                        &self.model,
                        &self.splits.val,
                        &EvalSpec {
                            context: c,
                            max_windows: Some(self.cfg.game.probe_windows),
                            ..spec
                        },
                    )?;
                    u.push(game::utility(probe.ce, probe.sat_frac, probe.mu_entropy, &self.cfg.game.params)?);
                }
                g.update(&u)?;
                Some(g.probabilities().to_vec())
            }
            None => None,
        };

        let admitted = match &mut self.swa {
            Some(s) => Some(s.consider(self.epoch, ce, entry, self.model.params().values())?),
            None => None,
        };

        let mut rec = MetricsRecord::new("val", self.step, self.epoch, ce);
        rec.split = Some("val".into());
        rec.tau_att = decision.tau_att;
        rec.mu_entropy = val.mu_entropy;
        rec.sat_frac = val.sat_frac;
        rec.q = q.clone();
        rec.guardian = self.guardian.enabled().then(|| GuardianRecord {
            action: GuardianRecord::action(decision.action),
            reward,
            lambda_delta: decision.lambda_delta,
            lambda_sat: decision.lambda_sat,
            beta: self.guardian.beta(),
        });
        rec.swa_count = self.swa.as_ref().map_or(0, |s| s.count());
        rec.swa_admitted = admitted;
        rec.weights = Some(EvalWeights::Raw.as_str().into());
        rec.wall_time = self.wall();
        sink.record(&rec)?;

        let summary = EpochSummary {
            epoch: self.epoch,
            step: self.step,
            val_ce: ce,
            swa_admitted: admitted.unwrap_or(false),
            tau_att: decision.tau_att,
            q,
            reward,
        };
        self.prev_val = Some(ce);
        self.prev_gate = Some(val.gate_mean);
        self.history.push(summary.clone());
        self.epoch += 1;
        Ok(summary)
    }

    /// Runs one epoch of steps followed by the epoch-end events.
    pub fn run_epoch(&mut self, sink: &mut dyn MetricsSink) -> Result<EpochSummary> {
        for _ in 0..self.cfg.steps_per_epoch {
            let r = self.train_step()?;
            let every = self.cfg.log_every;
            if every > 0 && r.step % every == 0 {
                let mut rec = MetricsRecord::new("train", r.step, self.epoch, r.ce);
                rec.split = Some("train".into());
                rec.lr = Some(r.lr);
                rec.tau_att = mean(&self.model.taus());
                rec.mu_entropy = r.mu_entropy;
                rec.sat_frac = r.sat_frac;
                rec.context = Some(r.context);
                rec.swa_count = self.swa.as_ref().map_or(0, |s| s.count());
                rec.dropout = Some(r.dropout);
                rec.chaos = Some(r.chaos);
                rec.wall_time = self.wall();
                sink.record(&rec)?;
            }
        }
        self.end_epoch(sink)
    }

    /// Weights used for final evaluation with their provenance.
    pub fn eval_weights(&self) -> (EvalWeights, Vec<Tensor>) {
        let swa_mean = self.swa.as_ref().and_then(|s| s.mean());
        let (w, t) = rpa_core::schedules::select_eval_weights(
            self.model.params().values(),
            self.ema.as_ref(),
            swa_mean.as_deref(),
        );
        (w, t.to_vec())
    }

    /// The current model carrying the given weights.
    pub fn model_with(&self, weights: Vec<Tensor>) -> Result<Model> {
        let mut m = self.model.clone();
        if !m.params_mut().load_values(weights) {
            return Err(LabError::Format("weight layout mismatch".into()));
        }
        Ok(m)
    }

    /// Evaluates a split with the selected weights.
    pub fn eval_split(&self, split: &str) -> Result<(EvalWeights, EvalReport)> {
        let (w, t) = self.eval_weights();
        let m = self.model_with(t)?;
        let r = evaluate(&m, self.splits.get(split)?, &EvalSpec::from_config(&self.cfg))?;
        Ok((w, r))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.cfg,
            CheckpointMeta {
                step: self.step,
                epoch: self.epoch,
                bias_scales: self.model.bias_scales().to_vec(),
                lambda_sat: self.guardian.lambda_sat(),
            },
            &self.model,
            self.ema.as_ref().map(|e| e.shadow()),
            self.swa.as_ref().and_then(|s| s.mean()),
        )
    }

    /// Full run: header, every epoch, then final validation and test
    /// records with the selected weights.
    pub fn run(mut self, sink: &mut dyn MetricsSink) -> Result<TrainOutcome> {
        sink.header(&self.header())?;
        while self.epoch < self.cfg.epochs {
            self.run_epoch(sink)?;
        }
        let (weights, final_val) = self.eval_split("val")?;
        let (_, final_test) = self.eval_split("test")?;
        for (split, r) in [("val", &final_val), ("test", &final_test)] {
            let mut rec = MetricsRecord::new("final", self.step, self.epoch, r.ce);
            rec.split = Some(split.into());
            rec.tau_att = r.tau_att;
            rec.mu_entropy = r.mu_entropy;
            rec.sat_frac = r.sat_frac;
            rec.swa_count = self.swa.as_ref().map_or(0, |s| s.count());
            rec.weights = Some(weights.as_str().into());
            rec.wall_time = self.wall();
            sink.record(&rec)?;
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            epochs: self.history,
            weights,
            final_val,
            final_test,
        })
    }
}
