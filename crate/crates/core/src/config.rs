//! Model and training configuration, read from TOML.
//!
//! ```toml
//! [model]
//! d_h = 64
//! stack = ["CPDC-OMNI", "APDC-CCW", "RPDC-OMNI", "CNN-2D"]
//! global_order = "cs"
//!
//! [train]
//! lr = 1e-3
//! batch_size = 5
//! epochs = 200
//! seed = 13
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::globalattn::GlobalOrder;
use crate::pdconv::{parse_stack, PdcKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub d_h: usize,
    pub d_p: usize,
    pub d_a: usize,
    pub attn_head_dim: usize,
    pub max_len: usize,
    /// Replace the position code with the plain offset `j - i`.
    pub relative_position: bool,
    /// Convolution block names, in order.
    pub stack: Vec<String>,
    pub global_order: GlobalOrder,
    /// Skip connections around every conv block and the attention module.
    pub residual: bool,
    pub use_local: bool,
    pub use_global: bool,
    pub use_position: bool,
    pub use_attention: bool,
    /// Head hidden width; `2 * d_h` when unset.
    pub head_hidden: Option<usize>,
    pub keep_prob: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::BiRecurrent,
            embed_dim: 32,
            d_h: 64,
            d_p: 16,
            d_a: 16,
            attn_head_dim: 8,
            max_len: 100,
            relative_position: false,
            stack: ["CPDC-OMNI", "APDC-CCW", "RPDC-OMNI", "CNN-2D"].map(String::from).to_vec(),
            global_order: GlobalOrder::ChannelSpatial,
            residual: true,
            use_local: true,
            use_global: true,
            use_position: true,
            use_attention: true,
            head_hidden: None,
            keep_prob: 0.9,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn stack_kinds(&self) -> Result<Vec<PdcKind>> {
        if self.stack.is_empty() {
            return Err(Error::config("stack needs at least one block"));
        }
        self.stack.iter().map(|s| s.parse()).collect()
    }

    /// Sets the stack from a label such as `[C-A_r-R-V]`.
    pub fn set_stack(&mut self, label: &str) -> Result<()> {
        self.stack = parse_stack(label)?.iter().map(|k| k.name().to_string()).collect();
        Ok(())
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(2 * self.d_h)
    }

    /// Drops both consolidation stages: the head reads `M^so` directly.
    pub fn without_bicon(mut self) -> Self {
        self.use_local = false;
        self.use_global = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_local {
            self.stack_kinds()?;
        }
        if !(0.0 < self.keep_prob && self.keep_prob <= 1.0) {
            return Err(Error::config(format!("keep_prob must lie in (0, 1], got {}", self.keep_prob)));
        }
        if self.head_hidden() == 0 || self.ln_eps <= 0.0 {
            return Err(Error::config("head_hidden and ln_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; no clipping when unset.
    pub clip_norm: Option<f64>,
    /// Score the training set after every epoch.
    pub eval_train: bool,
    /// Stop once train partial F1 reaches this (needs `eval_train`) and dev
    /// partial F1 reaches `target_dev_f1`.
    pub target_train_f1: Option<f64>,
    pub target_dev_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 5,
            epochs: 200,
            seed: 13,
            clip_norm: Some(5.0),
            eval_train: true,
            target_train_f1: None,
            target_dev_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.lr < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::config("invalid optimizer settings"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 4] = ["desk", "synthetic", "nyt", "webnlg"];

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Named settings. `synthetic` is sized for the generated corpus on one
    /// CPU core; `nyt` and `webnlg` carry the benchmark head width and batch.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Config::default();
        match name {
            "desk" => {}
            "synthetic" => {
                c.model.embed_dim = 24;
                c.model.d_h = 32;
                c.model.d_p = 8;
                c.model.d_a = 8;
                c.model.attn_head_dim = 4;
                c.model.max_len = 40;
                c.train.lr = 3e-3;
                c.train.target_train_f1 = Some(0.95);
                c.train.target_dev_f1 = Some(0.8);
            }
            "nyt" => {
                c.model.head_hidden = Some(3 * c.model.d_h);
                c.train.batch_size = 5;
            }
            "webnlg" => c.train.batch_size = 6,
            _ => {
                return Err(Error::config(format!(
                    "unknown preset {name:?}, expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }
}
