//! Experiment configuration file: TOML with `[scene]`, `[pretrain]` and
//! `[train]` sections whose keys mirror the corresponding structs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::synth::{PretrainConfig, SceneConfig};
use crate::training::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "RPL_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ExperimentConfig::from_toml_str("[train]\nalpha = 0.9\niterations = 10\n").unwrap();
        assert_eq!(c.train.alpha, 0.9);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.beta, 0.85);
        assert_eq!(c.scene, SceneConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_toml_str("[train]\nalpah = 0.9\n").unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn toml_roundtrip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
