//! Flat `key = value` run configuration. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::heads::{HeadConfig, MaskNorm};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} set twice")]
    Repeated { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("required key {0:?} is missing")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub smiles_column: String,
    /// Empty means every non-SMILES column.
    pub tasks: Vec<String>,
    pub run_dir: PathBuf,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub mask_hidden: usize,
    pub mask_norm: MaskNorm,
    pub pool_eps: f64,
}

const KEYS: &[&str] = &[
    "data",
    "smiles_column",
    "tasks",
    "run_dir",
    "test_fraction",
    "lambda",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "epochs",
    "seed",
    "freeze_backbone",
    "max_len",
    "l1_normalize_by_length",
    "pos_weight",
    "hidden",
    "n_layers",
    "n_heads",
    "ffn_dim",
    "dropout",
    "ln_eps",
    "mask_hidden",
    "mask_norm",
    "pool_eps",
];

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }
}

impl RunConfig {
    /// Parses config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Repeated {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
        }
        let e = Entries(map);
        let d = TrainConfig::default();
        let data = e.0.get("data").ok_or(ConfigError::Missing("data"))?;
        let run_dir = e.0.get("run_dir").ok_or(ConfigError::Missing("run_dir"))?;
        let tasks = e
            .0
            .get("tasks")
            .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default();
        let train = TrainConfig {
            lambda: e.get("lambda", d.lambda)?,
            lr: e.get("lr", d.lr)?,
            weight_decay: e.get("weight_decay", d.weight_decay)?,
            beta1: e.get("beta1", d.beta1)?,
            beta2: e.get("beta2", d.beta2)?,
            eps: e.get("eps", d.eps)?,
            batch_size: e.get("batch_size", d.batch_size)?,
            epochs: e.get("epochs", d.epochs)?,
            seed: e.get("seed", d.seed)?,
            freeze_backbone: e.get("freeze_backbone", d.freeze_backbone)?,
            max_len: e.get("max_len", d.max_len)?,
            l1_normalize_by_length: e.get("l1_normalize_by_length", d.l1_normalize_by_length)?,
            pos_weight: e.get("pos_weight", d.pos_weight)?,
        };
        let enc = EncoderConfig::desk(5);
        let hidden = e.get("hidden", enc.hidden)?;
        let head = HeadConfig::for_hidden(hidden);
        let cfg = Self {
            data: base.join(data),
            smiles_column: e.get("smiles_column", "smiles".to_string())?,
            tasks,
            run_dir: base.join(run_dir),
            test_fraction: e.get("test_fraction", 0.2)?,
            train,
            hidden,
            n_layers: e.get("n_layers", enc.n_layers)?,
            n_heads: e.get("n_heads", enc.n_heads)?,
            ffn_dim: e.get("ffn_dim", enc.ffn_dim)?,
            dropout: e.get("dropout", enc.dropout)?,
            ln_eps: e.get("ln_eps", enc.ln_eps)?,
            mask_hidden: e.get("mask_hidden", head.mask_hidden)?,
            mask_norm: e.get("mask_norm", head.mask_norm)?,
            pool_eps: e.get("pool_eps", head.pool_eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_config(5, vec!["t".into()])
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn model_config(&self, vocab_size: usize, tasks: Vec<String>) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                hidden: self.hidden,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                ffn_dim: self.ffn_dim,
                max_len: self.train.max_len,
                dropout: self.dropout,
                ln_eps: self.ln_eps,
            },
            head: HeadConfig {
                mask_hidden: self.mask_hidden,
                mask_norm: self.mask_norm,
                pool_eps: self.pool_eps,
                ln_eps: self.ln_eps,
            },
            tasks,
        }
    }
}
