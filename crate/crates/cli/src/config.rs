//! Flat `key = value` run configuration with flag overrides.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use flexcast::data::SplitRatio;
use flexcast::{DecodingMode, ModelConfig, Patching, ReplicatedToken, ResizeMode, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },

    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },

    #[error("`{key}`: expected {expected}, found {found:?}")]
    BadValue {
        key: String,
        expected: String,
        found: String,
    },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("cannot read config {path}: {msg}")]
    Read { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub horizons: Vec<usize>,
    /// Cycle length override; `None` runs the FFT search.
    pub period: Option<usize>,
    /// `None` keeps each dataset's default split.
    pub split: Option<SplitRatio>,
    pub forward_fill: bool,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Keys set by the file or by flags.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::mini(),
            train: TrainConfig::default(),
            horizons: vec![96, 192, 336, 720],
            period: None,
            split: None,
            forward_fill: false,
            data: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            explicit: BTreeSet::new(),
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "enc_layers",
    "dec_layers",
    "d_model",
    "ffn_dim",
    "n_heads",
    "ref_patch",
    "decoding",
    "patching",
    "fixed_patch",
    "resize",
    "replicated_token",
    "rope_base",
    "omega_origin",
    "lr",
    "step_size",
    "gamma",
    "steps_per_epoch",
    "batch_size",
    "n_hist_tokens",
    "n_pred_tokens",
    "steps",
    "seed",
    "horizon",
    "period",
    "split",
    "forward_fill",
    "data",
    "checkpoint",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        expected: expected.into(),
        found: value.into(),
    })
}

fn parse_enum<T: FromStr>(key: &str, value: &str, names: &[&str]) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        expected: format!("one of {}", names.join(", ")),
        found: value.into(),
    })
}

fn parse_split(key: &str, value: &str) -> Result<SplitRatio, ConfigError> {
    let bad = || ConfigError::BadValue {
        key: key.into(),
        expected: "three ratios such as 7:1:2".into(),
        found: value.into(),
    };
    let parts: Vec<f64> = value
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [a, b, c] = parts[..] else {
        return Err(bad());
    };
    let total = a + b + c;
    if !(total > 0.0) || parts.iter().any(|p| *p < 0.0) {
        return Err(bad());
    }
    Ok(SplitRatio {
        train: a / total,
        val: b / total,
        test: c / total,
    })
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        const COUNT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        match key {
            "enc_layers" => m.enc_layers = parse(key, value, COUNT)?,
            "dec_layers" => m.dec_layers = parse(key, value, COUNT)?,
            "d_model" => m.d_model = parse(key, value, COUNT)?,
            "ffn_dim" => m.ffn_dim = parse(key, value, COUNT)?,
            "n_heads" => m.n_heads = parse(key, value, COUNT)?,
            "ref_patch" => m.reference_patch = parse(key, value, COUNT)?,
            "decoding" => m.decoding = parse_enum(key, value, DecodingMode::NAMES)?,
            "patching" => m.patching = parse_enum(key, value, Patching::NAMES)?,
            "fixed_patch" => m.fixed_patch = parse(key, value, COUNT)?,
            "resize" => m.resize_mode = parse_enum(key, value, ResizeMode::NAMES)?,
            "replicated_token" => {
                m.replicated_token = parse_enum(key, value, ReplicatedToken::NAMES)?
            }
            "rope_base" => m.rope_base = parse(key, value, REAL)?,
            "omega_origin" => m.omega_origin = parse(key, value, COUNT)?,
            "lr" => t.lr_init = parse(key, value, REAL)?,
            "step_size" => t.step_size = parse(key, value, COUNT)?,
            "gamma" => t.gamma = parse(key, value, REAL)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, value, COUNT)?,
            "batch_size" => t.batch_size = parse(key, value, COUNT)?,
            "n_hist_tokens" => t.n_hist_tokens = parse(key, value, COUNT)?,
            "n_pred_tokens" => t.n_pred_tokens = parse(key, value, COUNT)?,
            "steps" => t.steps = parse(key, value, COUNT)?,
            "seed" => t.seed = parse(key, value, COUNT)?,
            "horizon" => {
                self.horizons = value
                    .split(',')
                    .map(|h| parse(key, h.trim(), "comma-separated positive integers"))
                    .collect::<Result<_, _>>()?
            }
            "period" => self.period = Some(parse(key, value, COUNT)?),
            "split" => self.split = Some(parse_split(key, value)?),
            "forward_fill" => self.forward_fill = parse(key, value, "true or false")?,
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    line: 0,
                })
            }
        }
        self.explicit.insert(key.to_owned());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: flexcast::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(ConfigError::Invalid("horizons must be positive".into()));
        }
        if self.period == Some(0) {
            return Err(ConfigError::Invalid("period must be positive".into()));
        }
        Ok(())
    }
}

/// Parses a config file body, then applies `overrides` in order, then
/// validates.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_owned(),
            });
        };
        let key = key.trim();
        cfg.set(key, value.trim()).map_err(|e| match e {
            ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: i + 1 },
            other => other,
        })?;
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
