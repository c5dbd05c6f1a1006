use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::MultiwayConfig;
use crate::cloudproc::PreprocessConfig;
use crate::diffnum::AdamConfig;
use crate::error::{Error, Result};
use crate::evalbench::EvalConfig;
use crate::model::ModelConfig;

use super::SyntheticSceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            adam: AdamConfig::default(),
        }
    }
}

/// Every tunable of the command-line tools. Missing keys take their
/// defaults, so a file only needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds model initialization and every randomized preprocessing step.
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: MultiwayConfig,
    pub eval: EvalConfig,
    pub synth: SyntheticSceneSpec,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The complete configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.baseline.validate()?;
        self.synth.validate()?;
        if !(self.preprocess.voxel_size > 0.0) {
            return Err(Error::InvalidVoxelSize(self.preprocess.voxel_size));
        }
        if self.eval.window < 2 {
            return Err(Error::InvalidConfig("eval window must be at least 2".into()));
        }
        if !(self.train.adam.lr >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model.window, 10);
        assert_eq!(c.preprocess.voxel_size, 0.05);
        assert_eq!(c.baseline.voxel_size, 0.05);
        assert_eq!((c.model.self_attention.heads, c.model.self_attention.layers), (4, 4));
        assert_eq!((c.model.cross_attention.heads, c.model.cross_attention.layers), (4, 4));
        assert_eq!((c.model.loss.alpha, c.model.loss.beta), (1.0, 1.0));
    }

    #[test]
    fn full_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[model]\nwindow = 5\n[model.self_attention]\nheads = 2\nlayers = 1\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.window, 5);
        assert_eq!(c.model.self_attention.heads, 2);
        assert_eq!(c.model.cross_attention.heads, 4);
        assert_eq!(c.baseline, MultiwayConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nwindow = 1\n").is_err());
        assert!(RunConfig::from_toml("[model]\nwindw = 1\n").is_ok());
        assert!(RunConfig::from_toml("seed = \"x\"").is_err());
    }
}
