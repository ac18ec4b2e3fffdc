//! TOML run configuration: a preset name plus a flat set of optional
//! overrides. Unknown keys are rejected so typos fail fast.

use cavm_core::config::ModelConfig;
use cavm_core::error::{Error, Result};
use serde::Deserialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// "toy" (default) or "paper".
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub num_steps: Option<usize>,
    pub layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub image_size: Option<usize>,
    pub base_channels: Option<usize>,
    pub fine_dim: Option<usize>,
    pub coarse_dim: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lambda_l1: Option<f64>,
    pub lambda_adv: Option<f64>,
    pub lambda_l2: Option<f64>,
    pub token_space_l2: Option<bool>,
    pub freeze_codec_in_phase2: Option<bool>,
    pub steps_phase1: Option<u64>,
    pub steps_phase2: Option<u64>,
    pub checkpoint_interval: Option<u64>,
}

/// Training lengths and checkpoint cadence, resolved from file + CLI flags.
#[derive(Clone, Copy, Debug)]
pub struct RunPlan {
    pub steps_phase1: u64,
    pub steps_phase2: u64,
    pub checkpoint_interval: u64,
}

pub const DEFAULT_STEPS_PHASE1: u64 = 2000;
pub const DEFAULT_STEPS_PHASE2: u64 = 2000;

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Preset with overrides applied, validated.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(self.preset.as_deref().unwrap_or("toy"))?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.num_steps {
            cfg.ar.num_steps = v;
        }
        if let Some(v) = self.layers {
            cfg.ar.layers = v;
        }
        if let Some(v) = self.num_heads {
            cfg.ar.num_heads = v;
        }
        if let Some(v) = self.image_size {
            cfg.codec.image_size = v;
        }
        if let Some(v) = self.base_channels {
            cfg.codec.base_channels = v;
        }
        if let Some(v) = self.fine_dim {
            cfg.codec.fine_dim = v;
        }
        if let Some(v) = self.coarse_dim {
            cfg.codec.coarse_dim = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.optimizer.learning_rate = v;
        }
        if let Some(v) = self.lambda_l1 {
            cfg.loss.l1 = v;
        }
        if let Some(v) = self.lambda_adv {
            cfg.loss.adv = v;
        }
        if let Some(v) = self.lambda_l2 {
            cfg.loss.l2 = v;
        }
        if let Some(v) = self.token_space_l2 {
            cfg.loss.token_space_l2 = v;
        }
        if let Some(v) = self.freeze_codec_in_phase2 {
            cfg.freeze_codec_in_phase2 = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plan(&self, steps_override: Option<u64>) -> RunPlan {
        RunPlan {
            steps_phase1: steps_override
                .or(self.steps_phase1)
                .unwrap_or(DEFAULT_STEPS_PHASE1),
            steps_phase2: steps_override
                .or(self.steps_phase2)
                .unwrap_or(DEFAULT_STEPS_PHASE2),
            checkpoint_interval: self.checkpoint_interval.unwrap_or(0),
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of the resolved config.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}
