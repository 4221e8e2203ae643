use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::FeatureConfig;

/// Time reduction of the encoder front end and expansion of the decoder.
pub const SUBSAMPLE_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            model_dim: 64,
            n_heads: 2,
            ff_mult: 4,
            conv_kernel: 3,
            subsample_factor: SUBSAMPLE_FACTOR,
            frozen: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    pub codebook_size: usize,
    pub n_groups: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            codebook_size: 128,
            n_groups: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_lstm_layers: usize,
    pub lstm_dim: usize,
    pub conv_channels: usize,
    pub upsample_kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_lstm_layers: 2,
            lstm_dim: 64,
            conv_channels: 64,
            upsample_kernel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    pub hidden_dim: usize,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self { hidden_dim: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_speakers: usize,
    pub speaker_dim: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckConfig,
    pub decoder: DecoderConfig,
    pub adversary: AdversaryConfig,
    /// Checkpoint whose encoder is imported before training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub donor_checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_speakers: 6,
            speaker_dim: 256,
            init_seed: 0,
            features: FeatureConfig::default(),
            encoder: EncoderConfig::default(),
            bottleneck: BottleneckConfig::default(),
            decoder: DecoderConfig::default(),
            adversary: AdversaryConfig::default(),
            donor_checkpoint: None,
        }
    }
}

impl ModelConfig {
    pub fn n_mels(&self) -> usize {
        self.features.n_mels
    }

    pub fn group_dim(&self) -> usize {
        self.encoder.model_dim / self.bottleneck.n_groups
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("model.{key}: {msg}")));
        let e = &self.encoder;
        if e.subsample_factor != SUBSAMPLE_FACTOR {
            return bad("encoder.subsample_factor", format!("must be {SUBSAMPLE_FACTOR}"));
        }
        if e.model_dim == 0 || e.n_heads == 0 || e.model_dim % e.n_heads != 0 {
            return bad("encoder.model_dim", format!("{} not divisible by n_heads {}", e.model_dim, e.n_heads));
        }
        if e.conv_kernel % 2 == 0 || e.ff_mult == 0 {
            return bad("encoder.conv_kernel", "must be odd, with ff_mult ≥ 1".into());
        }
        let b = &self.bottleneck;
        if b.n_groups == 0 || b.codebook_size == 0 || e.model_dim % b.n_groups != 0 {
            return bad(
                "bottleneck.n_groups",
                format!("model_dim {} not divisible by {} groups", e.model_dim, b.n_groups),
            );
        }
        let d = &self.decoder;
        if d.n_lstm_layers == 0 || d.lstm_dim == 0 || d.conv_channels == 0 {
            return bad("decoder", "layer counts and widths must be positive".into());
        }
        // stride-2, pad (k−2)/2 doubles the length exactly
        if d.upsample_kernel < 2 || d.upsample_kernel % 2 != 0 {
            return bad("decoder.upsample_kernel", "must be even and ≥ 2".into());
        }
        if self.n_speakers == 0 || self.speaker_dim == 0 || self.adversary.hidden_dim == 0 {
            return bad("n_speakers", "speaker count, speaker_dim and adversary width must be positive".into());
        }
        if self.features.n_mels == 0 {
            return bad("features.n_mels", "must be positive".into());
        }
        Ok(())
    }
}
