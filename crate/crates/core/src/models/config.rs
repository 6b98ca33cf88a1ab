use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMask, SUBJECT_DIM};
use crate::{Error, Result};

/// How subject information enters a side network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Audio only.
    Ao,
    /// Subject vector concatenated with the audio embedding.
    Asl,
    /// Subject-driven gate over mel bins applied to the input spectrogram.
    Ase,
    /// Subject-generated first-layer kernels in a parallel conv path.
    Asp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ao, Variant::Asl, Variant::Ase, Variant::Asp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ao => "ao",
            Variant::Asl => "asl",
            Variant::Ase => "ase",
            Variant::Asp => "asp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Validation(format!("unknown model `{s}` (valid: ao, asl, ase, asp)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of the four conv stages; the last is the embedding
    /// size.
    pub channels: [usize; 4],
}

impl EncoderConfig {
    pub const FULL: EncoderConfig = EncoderConfig { channels: [64, 128, 256, 512] };
    pub const DESK: EncoderConfig = EncoderConfig { channels: [16, 32, 64, 128] };

    pub fn embedding_dim(&self) -> usize {
        self.channels[3]
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub subject_dim: usize,
    /// Width of every stage of the A+S-P parallel path and of its pooled
    /// output.
    pub parallel_dim: usize,
    pub mlp_hidden: usize,
    /// Hidden width of the subject MLPs (A+S-E gate, A+S-P kernels).
    pub subject_hidden: usize,
    pub feature_mask: FeatureMask,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Ao,
            encoder: EncoderConfig::default(),
            subject_dim: SUBJECT_DIM,
            parallel_dim: 8,
            mlp_hidden: 512,
            subject_hidden: 64,
            feature_mask: FeatureMask::All,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, encoder: EncoderConfig) -> Self {
        ModelConfig { variant, encoder, ..Default::default() }
    }

    /// Width of the vector entering the final MLP block.
    pub fn head_input_dim(&self) -> usize {
        let e = self.encoder.embedding_dim();
        match self.variant {
            Variant::Ao | Variant::Ase => e,
            Variant::Asl => e + self.subject_dim,
            Variant::Asp => e + self.parallel_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.channels.contains(&0) {
            return Err(Error::Validation("encoder channels must be positive".into()));
        }
        if self.subject_dim != SUBJECT_DIM {
            return Err(Error::Validation(format!("subject_dim must be {SUBJECT_DIM}, got {}", self.subject_dim)));
        }
        if self.mlp_hidden == 0 || self.subject_hidden == 0 || self.parallel_dim == 0 {
            return Err(Error::Validation("mlp_hidden, subject_hidden and parallel_dim must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_eps <= 0.0 {
            return Err(Error::Validation("bn_momentum must be in (0, 1) and bn_eps positive".into()));
        }
        Ok(())
    }
}
