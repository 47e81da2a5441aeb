//! Run configuration: a TOML file with `seed`, `workers` and the `[model]`,
//! `[audio]`, `[train]`, `[gate]` and `[classifier]` tables. Every key is
//! optional; unknown keys are rejected. Command-line flags override it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tmd_core::eval::ClassifierConfig;
use tmd_core::model::{ModelConfig, TrainConfig};
use tmd_core::pipeline::GateConfig;
use tmd_core::signal::AudioConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub model: ModelConfig,
    pub audio: AudioConfig,
    pub train: TrainConfig,
    pub gate: GateConfig,
    pub classifier: ClassifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            model: ModelConfig::default(),
            audio: AudioConfig::default(),
            train: TrainConfig::default(),
            gate: GateConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: tmd_core::Error| CliError::usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.gate.validate().map_err(usage)?;
        tmd_core::signal::AudioFrontend::new(&self.audio).map_err(usage)?;
        if self.workers == 0 {
            return Err(CliError::usage("workers must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::parse("seed = 4\n[model]\nhidden = 64\n[train]\nsteps = 7\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.hidden, 64);
        assert_eq!(c.model.dialect_dim, 128);
        assert_eq!(c.train.steps, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 4\n").unwrap_err().contains("sed"));
        assert!(RunConfig::parse("[model]\nhiden = 4\n").is_err());
        assert!(RunConfig::parse("[vocoder]\n").is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
