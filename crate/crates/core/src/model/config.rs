use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpa::{RpaConfig, DEFAULT_KAPPA, DEFAULT_POS_BETA};

/// Architecture and loss settings of the toy language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub regimes: usize,
    pub experts: usize,
    pub top_k: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Longest window the model accepts.
    pub max_len: usize,
    pub tau_att_init: f64,
    pub pos_beta_init: f64,
    pub kappa_init: f64,
    /// Aligned prior when set, distance/similarity prior otherwise.
    pub use_rpa: bool,
    pub rpa: RpaConfig,
    pub label_smooth: f64,
    pub ent_floor_eta: f64,
    pub ent_floor_alpha: f64,
    /// Gate each head by its own sigmoid instead of one scalar per sequence.
    pub per_head_gate: bool,
    /// Reuse the embedding table as the output projection.
    pub tie_embeddings: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Byte-level desk model.
    pub fn desk() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            layers: 2,
            heads: 2,
            regimes: 4,
            experts: 4,
            top_k: 2,
            ff_mult: 4,
            dropout: 0.1,
            max_len: 64,
            tau_att_init: 0.68,
            pos_beta_init: DEFAULT_POS_BETA,
            kappa_init: DEFAULT_KAPPA,
            use_rpa: true,
            rpa: RpaConfig::default(),
            label_smooth: 0.015,
            ent_floor_eta: 0.02,
            ent_floor_alpha: 1.0,
            per_head_gate: false,
            tie_embeddings: false,
            ln_eps: 1e-5,
        }
    }

    /// Full-size reference configuration (GPT-2 BPE vocabulary).
    pub fn full() -> Self {
        Self {
            vocab: 50257,
            d_model: 510,
            layers: 12,
            heads: 6,
            regimes: 4,
            dropout: 0.09,
            max_len: 1024,
            ..Self::desk()
        }
    }

    /// Smallest shape used by the finite-difference suite.
    pub fn gradcheck() -> Self {
        Self {
            vocab: 11,
            d_model: 8,
            layers: 1,
            heads: 2,
            regimes: 2,
            experts: 2,
            top_k: 2,
            ff_mult: 4,
            dropout: 0.0,
            max_len: 4,
            rpa: RpaConfig {
                detach_scores: false,
                ..RpaConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("regimes", self.regimes),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("ff_mult", self.ff_mult),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::arg(name, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::arg("heads", "must divide d_model"));
        }
        if self.top_k > self.experts {
            return Err(Error::arg("top_k", "must not exceed experts"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg("dropout", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smooth) {
            return Err(Error::arg("label_smooth", "must lie in [0, 1)"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::arg("ln_eps", "must be positive"));
        }
        self.rpa.validate()
    }
}
