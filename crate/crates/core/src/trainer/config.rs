use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::textcodec::PhonemeVocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "finetune" => Ok(Mode::Finetune),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected pretrain or finetune)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
        })
    }
}

/// Architecture settings that do not depend on the vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::desk(1, &PhonemeVocab::standard());
        ModelShape {
            layers: c.layers,
            heads: c.heads,
            d_model: c.d_model,
            ffn: c.ffn,
            dropout: c.dropout,
            max_len: c.max_len,
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, vocab_size: usize, phonemes: &PhonemeVocab) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            ffn: self.ffn,
            dropout: self.dropout,
            vocab_size,
            num_initials: phonemes.num_initials(),
            num_finals: phonemes.num_finals(),
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub deterministic: bool,
    pub mode: Mode,
    /// Dev evaluation every this many steps; 0 evaluates at each epoch end.
    pub eval_every: usize,
    /// Overrides `epochs` as the length of the run.
    pub max_steps: Option<usize>,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            peak_lr: 75e-6,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            deterministic: true,
            mode: Mode::Finetune,
            eval_every: 0,
            max_steps: None,
            model: ModelShape::default(),
        }
    }
}

/// Keys accepted in a config file, in the order they are written.
pub const CONFIG_KEYS: [&str; 20] = [
    "mode",
    "epochs",
    "max_steps",
    "batch_size",
    "peak_lr",
    "warmup_fraction",
    "weight_decay",
    "clip_norm",
    "alpha",
    "beta",
    "gamma",
    "seed",
    "deterministic",
    "eval_every",
    "layers",
    "heads",
    "d_model",
    "ffn",
    "dropout",
    "max_len",
];

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} is outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        self.weights.validate()
    }

    /// The loss weights in force: pretraining zeroes β and γ.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            Mode::Pretrain => LossWeights::pretrain(self.weights.alpha),
            Mode::Finetune => self.weights,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "peak_lr" => self.peak_lr = parse_value(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "alpha" => self.weights.alpha = parse_value(key, value)?,
            "beta" => self.weights.beta = parse_value(key, value)?,
            "gamma" => self.weights.gamma = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "deterministic" => self.deterministic = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "layers" => self.model.layers = parse_value(key, value)?,
            "heads" => self.model.heads = parse_value(key, value)?,
            "d_model" => self.model.d_model = parse_value(key, value)?,
            "ffn" => self.model.ffn = parse_value(key, value)?,
            "dropout" => self.model.dropout = parse_value(key, value)?,
            "max_len" => self.model.max_len = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{}:{}: {msg}", origin.display(), i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| at(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_file_string(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = match key {
                "mode" => self.mode.to_string(),
                "epochs" => self.epochs.to_string(),
                "max_steps" => self.max_steps.map_or("none".into(), |s| s.to_string()),
                "batch_size" => self.batch_size.to_string(),
                "peak_lr" => self.peak_lr.to_string(),
                "warmup_fraction" => self.warmup_fraction.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "clip_norm" => self.clip_norm.to_string(),
                "alpha" => self.weights.alpha.to_string(),
                "beta" => self.weights.beta.to_string(),
                "gamma" => self.weights.gamma.to_string(),
                "seed" => self.seed.to_string(),
                "deterministic" => self.deterministic.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "layers" => m.layers.to_string(),
                "heads" => m.heads.to_string(),
                "d_model" => m.d_model.to_string(),
                "ffn" => m.ffn.to_string(),
                "dropout" => m.dropout.to_string(),
                "max_len" => m.max_len.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

/// Learning rate at `step`: a linear ramp from 0 to the peak over the
/// warmup steps, then a linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("the schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::OutOfRange {
            what: "schedule",
            index: step,
            size: total_steps + 1,
        });
    }
    let (step, total) = (step as f64, total_steps as f64);
    let warmup = cfg.warmup_fraction * total;
    Ok(if step < warmup {
        cfg.peak_lr * step / warmup
    } else {
        cfg.peak_lr * (total - step) / (total - warmup)
    })
}
