//! Flat `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment. Unknown keys are rejected.
//! [`RunConfig::to_text`] writes every key so the result can be fed back in
//! unchanged.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{AnnealSchedule, ObjectiveMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: ObjectiveMode,
    pub lambda: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vocab_max: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    /// `None` means ten epochs' worth of steps.
    pub anneal_warmup_steps: Option<u64>,
    pub seed: u64,
    pub deterministic: bool,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub shared_noise: bool,
    pub anneal_copula: bool,
    pub scalar_w: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: ObjectiveMode::Copula,
            lambda: 0.4,
            latent_dim: 32,
            hidden_dim: 200,
            embed_dim: 200,
            vocab_max: 20_000,
            max_len: 200,
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            dropout: 0.5,
            anneal_warmup_steps: None,
            seed: 0,
            deterministic: false,
            train_path: None,
            valid_path: None,
            test_path: None,
            out_dir: None,
            shared_noise: false,
            anneal_copula: false,
            scalar_w: false,
            grad_clip: 5.0,
        }
    }
}

pub const KEYS: [&str; 22] = [
    "mode",
    "lambda",
    "latent_dim",
    "hidden_dim",
    "embed_dim",
    "vocab_max",
    "max_len",
    "batch_size",
    "epochs",
    "lr",
    "dropout",
    "anneal_warmup_steps",
    "seed",
    "deterministic",
    "train_path",
    "valid_path",
    "test_path",
    "out_dir",
    "shared_noise",
    "anneal_copula",
    "scalar_w",
    "grad_clip",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "vocab_max" => self.vocab_max = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "anneal_warmup_steps" => {
                self.anneal_warmup_steps = match value {
                    "" | "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "train_path" => self.train_path = parse_path(value),
            "valid_path" => self.valid_path = parse_path(value),
            "test_path" => self.test_path = parse_path(value),
            "out_dir" => self.out_dir = parse_path(value),
            "shared_noise" => self.shared_noise = parse_bool(key, value)?,
            "anneal_copula" => self.anneal_copula = parse_bool(key, value)?,
            "scalar_w" => self.scalar_w = parse_bool(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let warmup = self.anneal_warmup_steps.map(|s| s.to_string()).unwrap_or_else(|| "auto".into());
        let values: [String; 22] = [
            self.mode.to_string(),
            self.lambda.to_string(),
            self.latent_dim.to_string(),
            self.hidden_dim.to_string(),
            self.embed_dim.to_string(),
            self.vocab_max.to_string(),
            self.max_len.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.dropout.to_string(),
            warmup,
            self.seed.to_string(),
            self.deterministic.to_string(),
            show_path(&self.train_path),
            show_path(&self.valid_path),
            show_path(&self.test_path),
            show_path(&self.out_dir),
            self.shared_noise.to_string(),
            self.anneal_copula.to_string(),
            self.scalar_w.to_string(),
            self.grad_clip.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Range checks that do not need the corpus.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.vocab_max < 5 {
            return Err(Error::Config("vocab_max must leave room for at least one word".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            latent: self.latent_dim,
            dropout: self.dropout,
            scalar_w: self.scalar_w,
        }
    }

    pub fn anneal_schedule(&self, steps_per_epoch: u64) -> AnnealSchedule {
        AnnealSchedule::linear(self.anneal_warmup_steps.unwrap_or(10 * steps_per_epoch))
    }

    pub fn require_path<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a PathBuf> {
        value.as_ref().ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.lambda = 0.2;
        cfg.anneal_warmup_steps = Some(123);
        cfg.train_path = Some("data/train.txt".into());
        cfg.mode = ObjectiveMode::FullCov;
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nlambda = 0.6  # weight\nepochs=3\n").unwrap();
        assert_eq!(cfg.lambda, 0.6);
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse("lamda=0.4"), Err(Error::Config(m)) if m.contains("lamda")));
        assert!(RunConfig::parse("lambda").is_err());
        assert!(RunConfig::parse("epochs=-1").is_err());
        assert!(RunConfig::parse("deterministic=maybe").is_err());
        assert!(RunConfig::parse("mode=flow").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.lambda = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::default();
        assert!(matches!(cfg.require_path("train_path", &cfg.train_path), Err(Error::Config(m)) if m.contains("train_path")));
    }
}
