//! Run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dfm::DfmConfig;
use crate::diffusion::ModelConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{DeigError, Result};
use crate::ide::IdeConfig;
use crate::synth::bench::BenchConfig;
use crate::text::TextConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "DEIG_SEED";

/// Training and held-out scene sets plus ablation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Held-out scenes are generated from `seed + held_out_offset`.
    pub held_out_offset: u64,
    pub s_sweep: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_scenes: 400,
            eval_scenes: 100,
            held_out_offset: 1_000_000,
            s_sweep: vec![2, 4, 8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub text_sim: TextConfig,
    pub ide: IdeConfig,
    pub dfm: DfmConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            text_sim: TextConfig::default(),
            ide: IdeConfig::default(),
            dfm: DfmConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            // matches the default latent raster (16 cells of 2 pixels)
            bench: BenchConfig {
                resolution: 32,
                ..BenchConfig::default()
            },
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| DeigError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DeigError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| DeigError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            text_sim: self.text_sim.clone(),
            ide: self.ide.clone(),
            dfm: self.dfm.clone(),
            diffusion: self.diffusion.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.bench.validate()?;
        let d = &self.diffusion;
        if self.bench.resolution != d.grid_h * d.patch || self.bench.resolution != d.grid_w * d.patch {
            return Err(DeigError::Config(format!(
                "bench.resolution ({}) must equal the latent raster size ({}x{})",
                self.bench.resolution,
                d.grid_w * d.patch,
                d.grid_h * d.patch
            )));
        }
        if self.bench.max_instances > self.text_sim.max_instances {
            return Err(DeigError::Config("bench.max_instances exceeds text_sim.max_instances".into()));
        }
        if self.train.batch_size == 0 {
            return Err(DeigError::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective config as `config.json` inside `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DeigError::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| DeigError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 1, "ide": {"s": 4, "depth": 2}}"#).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn partial_config_takes_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 9, "train": {"steps": 10}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.ide, IdeConfig::default());
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.steps, 10);
        assert_eq!(RunConfig::default().model(), ModelConfig::default());
    }

    #[test]
    fn resolution_must_match_codec() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.bench.resolution = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn smoke_config_is_valid() {
        RunConfig::from_json(include_str!("../../../configs/smoke.json")).unwrap();
    }
}
