use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three architectures compared against each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain encoder, two-layer bottleneck, prediction from the last decoder.
    #[serde(rename = "unet3d")]
    Unet3d,
    /// As `Unet3d` with the dilated four-layer bottleneck.
    #[serde(rename = "unet3d-dilated", alias = "unet3d_dilated")]
    Unet3dDilated,
    /// Residual encoder, dilated bottleneck, and a head over all decoder outputs.
    #[serde(rename = "proposed")]
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Unet3d, Variant::Unet3dDilated, Variant::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Unet3d => "unet3d",
            Variant::Unet3dDilated => "unet3d-dilated",
            Variant::Proposed => "proposed",
        }
    }

    pub fn residual_encoder(self) -> bool {
        self == Variant::Proposed
    }

    pub fn dilated_bottleneck(self) -> bool {
        self != Variant::Unet3d
    }

    pub fn deep_supervision(self) -> bool {
        self == Variant::Proposed
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
        match s {
            "unet3d" => Ok(Variant::Unet3d),
            "unet3d-dilated" | "unet3d_dilated" => Ok(Variant::Unet3dDilated),
            "proposed" => Ok(Variant::Proposed),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected unet3d, unet3d-dilated or proposed)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of encoder (and decoder) stages.
    pub levels: usize,
    /// Channels at the first stage; doubled at each deeper stage.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Background, head, body.
    pub num_classes: usize,
    /// Dilations of the bottleneck layers (dilated variants only).
    pub dilation_rates: Vec<usize>,
    pub leaky_slope: f32,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            in_channels: 1,
            num_classes: 3,
            dilation_rates: vec![1, 2, 4, 8],
            leaky_slope: 0.01,
            variant: Variant::Proposed,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 6 {
            return Err(Error::config(format!("levels must be in 1..=6, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        let rates = &self.dilation_rates;
        if rates.len() != 4 || rates[0] != 1 || rates.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::config(format!(
                "dilation_rates must be four rates doubling from 1, got {rates:?}"
            )));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::config("leaky_slope must be finite and non-negative"));
        }
        Ok(())
    }

    /// Feature channels of encoder/decoder stage `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.levels
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }
}
