//! Whole-pipeline configuration read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::SyntheticSceneConfig;
use crate::model::ModelConfig;
use crate::slam::SlamConfig;
use crate::training::TrainingConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Points sampled from each cloud before encoding.
    pub sample_n: usize,
    pub dynamic_filter: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig { sample_n: 1024, dynamic_filter: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub registration: RegistrationConfig,
    pub slam: SlamConfig,
    pub synth: SyntheticSceneConfig,
    /// Synthetic sequences generated for training, seeded from `synth.seed`.
    pub train_sequences: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            registration: RegistrationConfig::default(),
            slam: SlamConfig::default(),
            synth: SyntheticSceneConfig::default(),
            train_sequences: 3,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.slam.validate()?;
        self.synth.validate()?;
        if self.registration.sample_n == 0 || self.train_sequences == 0 {
            return Err(Error::Config("sample_n and train_sequences must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_override() {
        let cfg = PipelineConfig { train_sequences: 5, ..Default::default() };
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let cfg = PipelineConfig::from_toml("train_sequences = 2\n[slam]\nrmse_max = 0.25\n").unwrap();
        assert_eq!(cfg.slam.rmse_max, 0.25);
        assert_eq!(cfg.slam.tau_min, SlamConfig::default().tau_min);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[synth]\nnoise_ratio = 0.7").is_err());
    }
}
