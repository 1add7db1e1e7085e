//! JSON run configuration for `tdn train`.
//!
//! ```json
//! {
//!   "model": { "m": 32, "K": 4, "L": 3, "C": 6, "eps_deg": 1e-9, "eps_ln": 1e-5, "activation": "relu" },
//!   "train": { "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "epochs": 200, "seed": 7, "shuffle": true },
//!   "paths": { "data": "bench.tdn1", "checkpoint": "model.tdnm", "log": "train.log" }
//! }
//! ```
//!
//! Unknown keys are rejected. Missing keys fall back to the values above,
//! except `m` and `C`, which default to the dimensions of the training data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Result, TdnError};
use crate::linalg::Activation;
use crate::model::TdnConfig;
use crate::representation::EPS_LN;
use crate::structure::EPS_DEG;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub paths: PathSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub m: Option<usize>,
    #[serde(rename = "K")]
    pub heads: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "C")]
    pub labels: Option<usize>,
    pub eps_deg: f64,
    pub eps_ln: f64,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            m: None,
            heads: 4,
            layers: 3,
            labels: None,
            eps_deg: EPS_DEG,
            eps_ln: EPS_LN,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            epochs: d.epochs,
            seed: d.seed,
            shuffle: d.shuffle,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TdnError::validation(format!("run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Model configuration, filling `m` and `C` from the data when absent.
    pub fn model_config(&self, data_dim: usize, data_labels: usize) -> Result<TdnConfig> {
        let s = &self.model;
        let cfg = TdnConfig {
            m: s.m.unwrap_or(data_dim),
            heads: s.heads,
            layers: s.layers,
            labels: s.labels.unwrap_or(data_labels),
            eps_deg: s.eps_deg,
            eps_ln: s.eps_ln,
            activation: s.activation,
        };
        cfg.validate()?;
        if cfg.m != data_dim {
            return Err(TdnError::validation(format!(
                "config sets m = {} but the data has {data_dim} features",
                cfg.m
            )));
        }
        if cfg.labels < data_labels {
            return Err(TdnError::validation(format!(
                "config sets C = {} but the data uses {data_labels} labels",
                cfg.labels
            )));
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            epochs: t.epochs,
            seed: t.seed,
            shuffle: t.shuffle,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
