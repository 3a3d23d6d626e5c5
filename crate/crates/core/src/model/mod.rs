//! Toy causal language model: embedding, a stack of pre-norm blocks
//! (memberships, prior-biased attention, gated expert mixture, residual
//! gate), final normalization and an output projection.

mod attention;
mod config;
mod gradcheck;
mod loss;
pub mod moe;

use alloc::format;
use alloc::vec::Vec;

pub use config::ModelConfig;
pub use gradcheck::{gradient_check, GradReport};
pub use loss::{cross_entropy_pure, lm_loss, LossParts};
pub use moe::MoeStats;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fuzzy::{self, FuzzyIds, FuzzyParams};
use crate::params::{fan_in_uniform, normal_init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::rpa::{self, BiasCache, BiasVars};
use crate::tensor::Tensor;

/// Output projection starts small so an untrained model predicts nearly
/// uniformly.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Instrumentation of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub attention_calls: u64,
    /// Additions of a prior to an attention score tensor.
    pub bias_adds: u64,
    /// Priors constructed from memberships (as opposed to read from a cache).
    pub bias_builds: u64,
    pub cache_hits: u64,
}

/// Per-call switches and state threaded through a forward pass.
#[derive(Debug)]
pub struct ForwardCtx<'a> {
    /// Training mode enables dropout and the entropy floor.
    pub training: bool,
    /// Disables dropout and routing noise.
    pub deterministic: bool,
    /// Current dropout probability (may differ from the configured base).
    pub dropout: f64,
    pub rng: Rng,
    /// Evaluation-time prior cache; ignored while training.
    pub cache: Option<&'a mut BiasCache>,
    /// Keep attention probabilities in the output.
    pub record_attention: bool,
    pub counters: Counters,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: Rng, dropout: f64, deterministic: bool) -> Self {
        Self {
            training: true,
            deterministic,
            dropout,
            rng,
            cache: None,
            record_attention: false,
            counters: Counters::default(),
        }
    }

    pub fn eval(rng: Rng, deterministic: bool) -> Self {
        Self {
            training: false,
            deterministic,
            dropout: 0.0,
            rng,
            cache: None,
            record_attention: false,
            counters: Counters::default(),
        }
    }

    pub fn with_cache(mut self, cache: &'a mut BiasCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn recording_attention(mut self) -> Self {
        self.record_attention = true;
        self
    }
}

/// Inverted dropout with a freshly drawn mask; identity when inactive.
pub(crate) fn dropout(tape: &mut Tape, x: Var, ctx: &mut ForwardCtx<'_>) -> Var {
    let p = ctx.dropout;
    if !ctx.training || ctx.deterministic || p <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - p);
    let rng = &mut ctx.rng;
    let mask = Tensor::from_fn(tape.shape(x), |_| if rng.uniform() < p { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m).expect("mask matches input shape")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub out_proj: Var,
    pub value_gamma: Var,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub mem: FuzzyIds,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out_proj: ParamId,
    pub value_gamma: ParamId,
    pub tau_att: ParamId,
    pub kappa: ParamId,
    pub pos_beta: ParamId,
    pub norm1_g: ParamId,
    pub norm1_b: ParamId,
    pub norm2_g: ParamId,
    pub norm2_b: ParamId,
    pub gate: ParamId,
    pub experts: Vec<ExpertIds>,
    pub res_gate: ParamId,
}

/// Diagnostics of one block in one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStats {
    pub tau_att: f64,
    pub kappa: f64,
    pub mu_entropy: f64,
    pub lb_reg: f64,
    pub expert_usage: Vec<f64>,
    /// Mean residual-gate activation.
    pub gate_mean: f64,
    pub sat_frac: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, T, V]`
    pub logits: Var,
    /// Mean over blocks of the membership entropy (recorded).
    pub mu_entropy: Var,
    pub blocks: Vec<BlockStats>,
    /// Memberships of each block, `[B, T, R]`.
    pub memberships: Vec<Tensor>,
    /// Priors used by each block, `[T, T]`.
    pub priors: Vec<Tensor>,
    /// Attention probabilities `[B, H, T, T]` when recording was requested.
    pub attention: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn mean_gate(&self) -> f64 {
        mean_of(self.blocks.iter().map(|b| b.gate_mean))
    }

    pub fn mean_sat_frac(&self) -> f64 {
        mean_of(self.blocks.iter().map(|b| b.sat_frac))
    }

    pub fn mean_tau(&self) -> f64 {
        mean_of(self.blocks.iter().map(|b| b.tau_att))
    }

    pub fn mean_lb_reg(&self) -> f64 {
        mean_of(self.blocks.iter().map(|b| b.lb_reg))
    }
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    embed: ParamId,
    blocks: Vec<BlockIds>,
    final_g: ParamId,
    final_b: ParamId,
    head_w: Option<ParamId>,
    head_b: ParamId,
    /// Warm-in (and chaos) multiplier on each block's prior.
    bias_scale: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let mut rng = root.derive("model.init");
        let (d, r, v) = (cfg.d_model, cfg.regimes, cfg.vocab);
        let ff = d * cfg.ff_mult;
        let mut store = ParamStore::new();
        let embed = store.add("embed", normal_init(&[v, d], 1.0, &mut rng));
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("blocks.{l}");
            let mem = FuzzyParams::init(d, r, &mut rng)?.register(&mut store, &format!("{p}.mem"));
            let mut lin = |store: &mut ParamStore, name: &str, shape: &[usize], fan: usize| {
                store.add(format!("{p}.{name}"), fan_in_uniform(shape, fan, &mut rng))
            };
            let wq = lin(&mut store, "attn.wq", &[d, d], d);
            let wk = lin(&mut store, "attn.wk", &[d, d], d);
            let wv = lin(&mut store, "attn.wv", &[d, d], d);
            let out_proj = lin(&mut store, "attn.out_proj", &[d, d], d);
            let value_gamma = lin(&mut store, "attn.value_gamma", &[r, cfg.heads], r);
            let gate = lin(&mut store, "moe.gate", &[r, cfg.experts], r);
            let mut experts = Vec::with_capacity(cfg.experts);
            for e in 0..cfg.experts {
                experts.push(ExpertIds {
                    w1: lin(&mut store, &format!("moe.experts.{e}.w1"), &[d, ff], d),
                    b1: lin(&mut store, &format!("moe.experts.{e}.b1"), &[ff], d),
                    w2: lin(&mut store, &format!("moe.experts.{e}.w2"), &[ff, d], ff),
                    b2: lin(&mut store, &format!("moe.experts.{e}.b2"), &[d], ff),
                });
            }
            let res_gate = lin(&mut store, "res_gate", &[r, 1], r);
            let tau_att = store.add(format!("{p}.attn.tau_att"), Tensor::scalar(cfg.tau_att_init));
            let kappa = store.add(format!("{p}.attn.kappa"), Tensor::scalar(cfg.kappa_init));
            let pos_beta = store.add(format!("{p}.attn.pos_beta"), Tensor::scalar(cfg.pos_beta_init));
            let norm1_g = store.add(format!("{p}.norm1.weight"), Tensor::ones(&[d]));
            let norm1_b = store.add(format!("{p}.norm1.bias"), Tensor::zeros(&[d]));
            let norm2_g = store.add(format!("{p}.norm2.weight"), Tensor::ones(&[d]));
            let norm2_b = store.add(format!("{p}.norm2.bias"), Tensor::zeros(&[d]));
            blocks.push(BlockIds {
                mem,
                wq,
                wk,
                wv,
                out_proj,
                value_gamma,
                tau_att,
                kappa,
                pos_beta,
                norm1_g,
                norm1_b,
                norm2_g,
                norm2_b,
                gate,
                experts,
                res_gate,
            });
        }
        let final_g = store.add("final_norm.weight", Tensor::ones(&[d]));
        let final_b = store.add("final_norm.bias", Tensor::zeros(&[d]));
        let head_w = if cfg.tie_embeddings {
            None
        } else {
            Some(store.add("head.weight", normal_init(&[d, v], HEAD_INIT_STD, &mut rng)))
        };
        let head_b = store.add("head.bias", Tensor::zeros(&[v]));
        let layers = cfg.layers;
        Ok(Self {
            cfg,
            store,
            embed,
            blocks,
            final_g,
            final_b,
            head_w,
            head_b,
            bias_scale: alloc::vec![1.0; layers],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[BlockIds] {
        &self.blocks
    }

    pub fn bias_scales(&self) -> &[f64] {
        &self.bias_scale
    }

    /// Sets every block's prior multiplier (clamped to `[0, 1]` at use).
    pub fn set_bias_scale(&mut self, s: f64) {
        self.bias_scale.iter_mut().for_each(|b| *b = s);
    }

    /// Per-block multipliers; extra entries are ignored, missing ones kept.
    pub fn set_bias_scales(&mut self, s: &[f64]) {
        for (b, &v) in self.bias_scale.iter_mut().zip(s) {
            *b = v;
        }
    }

    /// Current attention temperature of each block.
    pub fn taus(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| self.store.get(b.tau_att).item()).collect()
    }

    pub fn set_taus(&mut self, taus: &[f64]) {
        for (b, &t) in self.blocks.iter().zip(taus) {
            *self.store.get_mut(b.tau_att) = Tensor::scalar(t);
        }
    }

    /// Records the forward pass for `tokens` laid out as `[batch, len]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
        len: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        if len == 0 || batch == 0 {
            return Err(Error::shape("forward", "empty batch"));
        }
        if len > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: cfg.max_len,
            });
        }
        if tokens.len() != batch * len {
            return Err(Error::shape(
                "forward",
                format!("{} tokens for [{batch}, {len}]", tokens.len()),
            ));
        }
        let table = self.store.leaf(tape, self.embed);
        let mut x = tape.embedding(table, tokens, &[batch, len])?;
        let mut stats = Vec::with_capacity(self.blocks.len());
        let mut mus = Vec::with_capacity(self.blocks.len());
        let mut priors = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::new();
        let mut entropy: Option<Var> = None;
        for (l, ids) in self.blocks.iter().enumerate() {
            let out = self.block(tape, l, ids, x, ctx)?;
            x = out.x;
            entropy = Some(match entropy {
                Some(e) => tape.add(e, out.entropy)?,
                None => out.entropy,
            });
            stats.push(out.stats);
            mus.push(out.mu);
            priors.push(out.prior);
            if let Some(a) = out.attention {
                attention.push(a);
            }
        }
        let entropy = match entropy {
            Some(e) => tape.scale(e, 1.0 / self.blocks.len() as f64),
            None => tape.scalar(0.0),
        };
        let g = self.store.leaf(tape, self.final_g);
        let b = self.store.leaf(tape, self.final_b);
        let x = tape.layer_norm(x, g, b, cfg.ln_eps)?;
        let w = match self.head_w {
            Some(id) => self.store.leaf(tape, id),
            None => tape.transpose(table)?,
        };
        let logits = tape.matmul(x, w)?;
        let hb = self.store.leaf(tape, self.head_b);
        let logits = tape.add(logits, hb)?;
        Ok(ForwardOutput {
            logits,
            mu_entropy: entropy,
            blocks: stats,
            memberships: mus,
            priors,
            attention,
        })
    }

    fn block(
        &self,
        tape: &mut Tape,
        index: usize,
        ids: &BlockIds,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<BlockOut> {
        let cfg = &self.cfg;
        let len = tape.shape(x)[1];
        let mem = ids.mem.record(&self.store, tape);
        let mu = fuzzy::memberships_on_tape(tape, x, &mem)?;
        let mu = tape.nan_to_num(mu, 1.0 / cfg.regimes as f64, 1.0, 0.0);
        let rg = self.store.leaf(tape, ids.res_gate);
        let eta = tape.matmul(mu, rg)?;
        let eta = tape.sigmoid(eta); // [B,T,1]

        let tau = self.store.leaf(tape, ids.tau_att);
        let kappa = self.store.leaf(tape, ids.kappa);
        let pos_beta = self.store.leaf(tape, ids.pos_beta);
        let bias = self.prior(tape, index, mu, tau, kappa, pos_beta, len, ctx)?;

        let g1 = self.store.leaf(tape, ids.norm1_g);
        let b1 = self.store.leaf(tape, ids.norm1_b);
        let h = tape.layer_norm(x, g1, b1, cfg.ln_eps)?;
        let av = AttentionVars {
            wq: self.store.leaf(tape, ids.wq),
            wk: self.store.leaf(tape, ids.wk),
            wv: self.store.leaf(tape, ids.wv),
            out_proj: self.store.leaf(tape, ids.out_proj),
            value_gamma: self.store.leaf(tape, ids.value_gamma),
        };
        let (a, probs) = attention::biased_attention(tape, h, mu, bias, &av, cfg, ctx)?;
        let a = dropout(tape, a, ctx);
        let a = tape.mul(eta, a)?;
        let x = tape.add(x, a)?;

        let g2 = self.store.leaf(tape, ids.norm2_g);
        let b2 = self.store.leaf(tape, ids.norm2_b);
        let h = tape.layer_norm(x, g2, b2, cfg.ln_eps)?;
        let gate = self.store.leaf(tape, ids.gate);
        let ev: Vec<ExpertVars> = ids
            .experts
            .iter()
            .map(|e| ExpertVars {
                w1: self.store.leaf(tape, e.w1),
                b1: self.store.leaf(tape, e.b1),
                w2: self.store.leaf(tape, e.w2),
                b2: self.store.leaf(tape, e.b2),
            })
            .collect();
        let (m, moe) = moe::fuzzy_moe(tape, h, mu, gate, &ev, cfg, ctx)?;
        let m = dropout(tape, m, ctx);
        let m = tape.mul(eta, m)?;
        let x = tape.add(x, m)?;

        let entropy = fuzzy::entropy_on_tape(tape, mu)?;
        let mu_t = tape.value(mu).clone();
        let stats = BlockStats {
            tau_att: self.store.get(ids.tau_att).item(),
            kappa: self.store.get(ids.kappa).item(),
            mu_entropy: tape.value(entropy).item(),
            lb_reg: moe.lb_reg,
            expert_usage: moe.usage,
            gate_mean: tape.value(eta).mean(),
            sat_frac: fuzzy::saturation_fraction(&mu_t, fuzzy::DEFAULT_SATURATION_THRESHOLD),
        };
        Ok(BlockOut {
            x,
            entropy,
            stats,
            mu: mu_t,
            prior: tape.value(bias).clone(),
            attention: ctx.record_attention.then(|| tape.value(probs).clone()),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn prior(
        &self,
        tape: &mut Tape,
        index: usize,
        mu: Var,
        tau: Var,
        kappa: Var,
        pos_beta: Var,
        len: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if !ctx.training {
            if let Some(cache) = ctx.cache.as_deref_mut() {
                if let Some(b) = cache.get(index, len) {
                    let b = b.clone();
                    ctx.counters.cache_hits += 1;
                    return Ok(tape.constant(b));
                }
            }
        }
        let scale = self.bias_scale[index];
        let vars = BiasVars { tau_att: tau, pos_beta };
        let bias = if cfg.use_rpa {
            rpa::rpa_bias_on_tape(tape, mu, &cfg.rpa, vars, scale)?.bias
        } else {
            rpa::legacy_bias_on_tape(tape, mu, vars, kappa, cfg.rpa.clip, cfg.rpa.tau_max, scale)?
        };
        ctx.counters.bias_builds += 1;
        if !ctx.training {
            if let Some(cache) = ctx.cache.as_deref_mut() {
                cache.insert(index, len, tape.value(bias).clone());
            }
        }
        Ok(bias)
    }
}

struct BlockOut {
    x: Var,
    entropy: Var,
    stats: BlockStats,
    mu: Tensor,
    prior: Tensor,
    attention: Option<Tensor>,
}

#[cfg(test)]
mod tests;
