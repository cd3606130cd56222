//! Experiment configuration file.
//!
//! A TOML document with a top-level `seed` and the sections `[data]`,
//! `[model]`, `[train]`, `[mask]` and `[eval]`. Every key is optional and
//! falls back to its default; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atm::MaskSchedule;
use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::trainer::{ModelConfig, OptimConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: OptimConfig,
    pub mask: MaskSchedule,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: OptimConfig::default(),
            mask: MaskSchedule::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Pulls the offending key out of a deserializer message.
fn offending_key(message: &str) -> Option<String> {
    let rest = &message[message.find("unknown field `")? + "unknown field `".len()..];
    Some(rest[..rest.find('`')?].to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            match offending_key(&message) {
                Some(key) => Error::config(key, format!("unknown key: {message}")),
                None => Error::config("config", message),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            d: self.data.d,
            model: self.model.clone(),
            optim: self.train.clone(),
            mask: self.mask.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.eval.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config always serializes");
        hex::encode(Sha256::digest(&json))
    }
}
