use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    /// All eight low-branch stages.
    Deep55,
    /// Low branch without its last bottleneck group; the decoder reads stage 7.
    Shallow43,
}

/// Normalization after each encoder and decoder convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Plain biased convolutions.
    #[default]
    None,
    /// Group norm over groups of 8 channels.
    Group,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("input size {h}x{w} must have both sides divisible by 16")]
    InputSize { h: usize, w: usize },
    #[error("width multiplier must be positive and finite, got {0}")]
    Width(f64),
    #[error("low branch downsample must be 2, got {0}")]
    Downsample(usize),
    #[error("num_finger_classes must be at least 1")]
    Classes,
    #[error("config json: {0}")]
    Json(String),
}

/// Architecture hyperparameters. Serialized as the JSON document stored
/// next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(H, W)` in pixels.
    pub input_size: (usize, usize),
    pub width_multiplier: f64,
    pub encoder_variant: EncoderVariant,
    pub cascade_enabled: bool,
    pub low_branch_downsample: usize,
    pub num_finger_classes: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (288, 288),
            width_multiplier: 1.0,
            encoder_variant: EncoderVariant::Deep55,
            cascade_enabled: true,
            low_branch_downsample: 2,
            num_finger_classes: 10,
            normalization: Normalization::None,
        }
    }
}

impl ModelConfig {
    /// The small width used for desk-scale training.
    pub fn tiny(h: usize, w: usize) -> Self {
        ModelConfig {
            input_size: (h, w),
            width_multiplier: 0.25,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(ConfigError::InputSize { h, w });
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(ConfigError::Width(self.width_multiplier));
        }
        if self.low_branch_downsample != 2 {
            return Err(ConfigError::Downsample(self.low_branch_downsample));
        }
        if self.num_finger_classes == 0 {
            return Err(ConfigError::Classes);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: ModelConfig = serde_json::from_str(s).map_err(|e| ConfigError::Json(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Channel count scaled by the width multiplier, rounded to a multiple
    /// of 8 without dropping more than 10% below the scaled value.
    pub fn scaled(&self, channels: usize) -> usize {
        make_divisible(channels as f64 * self.width_multiplier, 8)
    }
}

pub(crate) fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = ((v + d / 2.0) / d).floor() * d;
    out = out.max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}
