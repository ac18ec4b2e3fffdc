//! Whole-model configuration: codec + autoregression + optimizer + loss
//! weights, with the "toy" desk-scale preset (default) and the "paper"
//! preset holding the published hyperparameters.

use crate::autoreg::ArConfig;
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;
use crate::tokenizer::CodecConfig;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub adv: f64,
    pub l2: f64,
    /// Apply the phase-2 regression loss on token blocks instead of decoded
    /// images.
    pub token_space_l2: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, adv: 0.01, l2: 1.0, token_space_l2: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub ar: ArConfig,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    /// Keep tokenizers/decoder (and discriminator) fixed during phase 2.
    pub freeze_codec_in_phase2: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 64x64 images, small embeddings, 2-layer stacks.
    pub fn toy() -> Self {
        ModelConfig {
            codec: CodecConfig {
                image_size: 64,
                in_channels: 4,
                base_channels: 16,
                fine_dim: 32,
                coarse_dim: 64,
            },
            ar: ArConfig {
                num_steps: 3,
                layers: 2,
                num_heads: 4,
                rope_base: 10000.0,
                placeholder_fill: 0.0,
                max_seq_fine: None,
                max_seq_coarse: None,
            },
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            freeze_codec_in_phase2: true,
            seed: 0,
        }
    }

    /// The published hyperparameters: embedding dims 384/768, 4/8 heads,
    /// 4/8 layers, sequence capacities 432/864. Kept as a preset for
    /// completeness; not trainable at desk scale.
    pub fn paper() -> Self {
        ModelConfig {
            codec: CodecConfig {
                image_size: 128,
                in_channels: 4,
                base_channels: 96,
                fine_dim: 384,
                coarse_dim: 768,
            },
            ar: ArConfig {
                num_steps: 3,
                layers: 4,
                num_heads: 4,
                rope_base: 10000.0,
                placeholder_fill: 0.0,
                max_seq_fine: Some(864),
                max_seq_coarse: Some(432),
            },
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            freeze_codec_in_phase2: true,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected \"toy\" or \"paper\")"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.ar.validate(&self.codec)?;
        if self.loss.l1 < 0.0 || self.loss.adv < 0.0 || self.loss.l2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.optimizer.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}
