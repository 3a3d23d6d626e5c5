//! Run configuration (TOML) and named presets.

use std::path::{Path, PathBuf};

use rpa_core::game::GameConfig;
use rpa_core::guardian::GuardianConfig;
use rpa_core::model::ModelConfig;
use rpa_core::schedules::{ChaosConfig, LrSchedule, SwaConfig};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, SyntheticTask};
use crate::error::{LabError, Result};

pub const PRESETS: &[&str] = &["desk", "full", "ablation", "mix-384-768", "mix-256-512-1024", "tiny"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Text file for the byte tokenizer.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticTask,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            synthetic: SyntheticTask::default(),
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameSection {
    pub enable: bool,
    pub candidates: Vec<usize>,
    /// Validation windows per candidate used to score each context.
    pub probe_windows: usize,
    #[serde(flatten)]
    pub params: GameConfig,
}

impl Default for GameSection {
    fn default() -> Self {
        Self {
            enable: true,
            candidates: vec![32, 64],
            probe_windows: 8,
            params: GameConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaSection {
    pub enable: bool,
    pub decay: f64,
}

impl Default for EmaSection {
    fn default() -> Self {
        Self {
            enable: true,
            decay: 0.999,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwaSection {
    pub enable: bool,
    #[serde(flatten)]
    pub select: SwaConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChaosSection {
    pub enable: bool,
    #[serde(flatten)]
    pub params: ChaosConfig,
}

impl Default for ChaosSection {
    fn default() -> Self {
        Self {
            enable: true,
            params: ChaosConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub flat_frac: f64,
    pub floor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap (0 disables).
    pub grad_clip: f64,
    pub dropout_glide: bool,
    pub ema: EmaSection,
    pub swa: SwaSection,
    pub chaos: ChaosSection,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            flat_frac: 0.3,
            floor: 0.08,
            weight_decay: 0.01,
            grad_clip: 1.0,
            dropout_glide: true,
            ema: EmaSection::default(),
            swa: SwaSection::default(),
            chaos: ChaosSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub deterministic: bool,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub tokens_per_step: usize,
    /// Window length for validation and test.
    pub eval_context: usize,
    /// Cap on evaluation windows (0: all).
    pub eval_windows: usize,
    pub eval_batch: usize,
    /// Log a training record every this many steps (0: never).
    pub log_every: usize,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub guardian: GuardianConfig,
    pub game: GameSection,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        let data = DataConfig::default();
        let model = ModelConfig {
            vocab: data.synthetic.vocab(),
            ..ModelConfig::desk()
        };
        Self {
            name: "desk".into(),
            seed: 0,
            deterministic: false,
            epochs: 20,
            steps_per_epoch: 50,
            tokens_per_step: 2048,
            eval_context: 64,
            eval_windows: 64,
            eval_batch: 16,
            log_every: 10,
            output_dir: None,
            data,
            model,
            guardian: GuardianConfig::default(),
            game: GameSection::default(),
            schedule: ScheduleConfig::default(),
        }
    }

    /// Full-size layout: 12 layers of width 510 on a 50k vocabulary with
    /// 24,576 tokens per step. Far beyond a desk CPU; shipped for reference.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.name = "full".into();
        c.model = ModelConfig::full();
        c.data.source = DataSource::Text;
        c.data.path = Some("corpus.txt".into());
        c.tokens_per_step = 24_576;
        c.eval_context = 1024;
        c.eval_windows = 0;
        c.eval_batch = 4;
        c.game.candidates = vec![256, 512, 1024];
        c.epochs = 100;
        c.steps_per_epoch = 1000;
        c.schedule.swa.enable = true;
        c.schedule.swa.select.start_epoch = 60;
        c
    }

    /// Small configuration used by the staged ablation.
    pub fn ablation() -> Self {
        let mut c = Self::desk();
        c.name = "ablation".into();
        c.model.d_model = 32;
        c.model.heads = 2;
        c.model.experts = 2;
        c.model.top_k = 2;
        c.model.ff_mult = 2;
        c.model.max_len = 64;
        c.model.rpa.warm_steps = 100;
        c.tokens_per_step = 512;
        c.epochs = 48;
        c.steps_per_epoch = 10;
        c.schedule.peak_lr = 6e-3;
        c.schedule.floor = 0.5;
        c.eval_context = 64;
        c.eval_windows = 32;
        c.log_every = 0;
        c.data.synthetic.tokens = 60_000;
        c.schedule.ema.decay = 0.99;
        c.schedule.swa.select.start_epoch = 36;
        c.schedule.swa.select.g_min = 0.0;
        c
    }

    /// Seconds-scale configuration for tests.
    pub fn tiny() -> Self {
        let mut c = Self::ablation();
        c.name = "tiny".into();
        c.model.d_model = 16;
        c.model.layers = 1;
        c.model.regimes = 2;
        c.model.max_len = 32;
        c.tokens_per_step = 128;
        c.epochs = 3;
        c.steps_per_epoch = 4;
        c.eval_context = 32;
        c.eval_windows = 8;
        c.eval_batch = 8;
        c.log_every = 2;
        c.game.candidates = vec![16, 32];
        c.game.probe_windows = 2;
        c.game.params = c.game.params.for_regimes(2);
        c.data.synthetic.tokens = 8_000;
        c.data.synthetic.gap_min = 4;
        c.data.synthetic.gap_max = 8;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = match name {
            "desk" => Self::desk(),
            "full" => Self::full(),
            "ablation" => Self::ablation(),
            "tiny" => Self::tiny(),
            "mix-384-768" => {
                let mut c = Self::full();
                c.game.candidates = vec![384, 768];
                c.tokens_per_step = 384 * 64;
                c
            }
            "mix-256-512-1024" => Self::full(),
            other => {
                return Err(LabError::config(format!(
                    "unknown preset {other:?}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        c.name = name.into();
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| LabError::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Candidate training contexts (the evaluation context alone when the
    /// game is off).
    pub fn contexts(&self) -> Vec<usize> {
        if self.game.enable {
            self.game.candidates.clone()
        } else {
            vec![self.eval_context]
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.schedule.peak_lr,
            flat_frac: self.schedule.flat_frac,
            floor: self.schedule.floor,
            total: self.total_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LabError::config(m));
        self.model.validate().map_err(|e| LabError::config(e.to_string()))?;
        self.model.rpa.validate().map_err(|e| LabError::config(e.to_string()))?;
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return err("epochs and steps_per_epoch must be positive".into());
        }
        if self.eval_batch == 0 {
            return err("eval_batch must be positive".into());
        }
        if self.eval_context == 0 || self.eval_context > self.model.max_len {
            return err(format!(
                "eval_context {} must lie in 1..={}",
                self.eval_context, self.model.max_len
            ));
        }
        if self.game.enable && self.game.candidates.is_empty() {
            return err("game.candidates must not be empty".into());
        }
        for &c in &self.contexts() {
            if c == 0 || c > self.model.max_len {
                return err(format!("context {c} must lie in 1..={}", self.model.max_len));
            }
            if !self.tokens_per_step.is_multiple_of(c) {
                return err(format!(
                    "tokens_per_step {} is not a multiple of context {c}",
                    self.tokens_per_step
                ));
            }
        }
        if self.game.enable && !(self.game.params.h_max > 0.0) {
            return err("game.h_max must be positive".into());
        }
        self.lr_schedule().validate().map_err(|e| LabError::config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.model.dropout) {
            return err("model.dropout must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.schedule.ema.decay) {
            return err("schedule.ema.decay must lie in [0, 1]".into());
        }
        match self.data.source {
            DataSource::Synthetic => {
                self.data.synthetic.validate()?;
                if self.data.synthetic.vocab() > self.model.vocab {
                    return err(format!(
                        "model.vocab {} is smaller than the synthetic vocabulary {}",
                        self.model.vocab,
                        self.data.synthetic.vocab()
                    ));
                }
            }
            DataSource::Text => {
                if self.data.path.is_none() {
                    return err("data.path is required for text sources".into());
                }
                if self.model.vocab < 256 {
                    return err("byte-level text needs model.vocab >= 256".into());
                }
            }
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.generate(self.seed),
            DataSource::Text => {
                let p = self.data.path.as_ref().ok_or_else(|| LabError::config("data.path missing"))?;
                corpus::load_text(p)
            }
        }
    }
}
