//! Strict JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::trainer::{CorruptionConfig, TrainConfig, TrainJob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub corruption: CorruptionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            corruption: CorruptionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Parses and validates; every failure is a config error naming the
    /// offending key or constraint.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.job().validate()?;
        self.eval.validate()
    }

    pub fn job(&self) -> TrainJob {
        TrainJob {
            corpus: self.corpus.clone(),
            model: self.model,
            train: self.train.clone(),
            corruption: self.corruption,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_json().unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"totl_steps": 5}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("totl_steps")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "train": {"total_steps": 7}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.total_steps, 7);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::from_json(r#"{"train": {"warmup_ratio": 1.0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("warmup_ratio")));
    }
}
