use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the inverted-residual plan: `repeats` blocks with expansion
/// factor `expansion` producing `out_channels`; only the first repeat uses
/// `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub const fn new(expansion: usize, out_channels: usize, repeats: usize, stride: usize) -> Self {
        Self {
            expansion,
            out_channels,
            repeats,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!(
                "block stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.repeats == 0 || self.expansion == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "block expansion, channels and repeats must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The MobileNetV2 bottleneck table `(t, c, n, s)`.
pub const MOBILENET_V2_PLAN: [BlockSpec; 7] = [
    BlockSpec::new(1, 16, 1, 1),
    BlockSpec::new(6, 24, 2, 2),
    BlockSpec::new(6, 32, 3, 2),
    BlockSpec::new(6, 64, 4, 2),
    BlockSpec::new(6, 96, 3, 1),
    BlockSpec::new(6, 160, 3, 2),
    BlockSpec::new(6, 320, 1, 1),
];

pub const STEM_CHANNELS: usize = 32;

pub const DEFAULT_DECODER_CHANNELS: [usize; 5] = [256, 128, 64, 32, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_side: usize,
    pub in_channels: usize,
    pub width_multiplier: f64,
    pub encoder_plan: Vec<BlockSpec>,
    pub decoder_channels: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 320,
            in_channels: 3,
            width_multiplier: 1.0,
            encoder_plan: MOBILENET_V2_PLAN.to_vec(),
            decoder_channels: DEFAULT_DECODER_CHANNELS.to_vec(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Default network at a different input side and width.
    pub fn scaled(input_side: usize, width_multiplier: f64) -> Self {
        Self {
            input_side,
            width_multiplier,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || !self.input_side.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_side must be a positive multiple of 32, got {}",
                self.input_side
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "width_multiplier must lie in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if self.decoder_channels.len() != 5 || self.decoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "decoder_channels must be 5 positive values, got {:?}",
                self.decoder_channels
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config(format!(
                "bn_eps must be positive, got {}",
                self.bn_eps
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must lie in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        if self.encoder_plan.is_empty() {
            return Err(Error::Config("encoder_plan is empty".into()));
        }
        for spec in &self.encoder_plan {
            spec.validate()?;
        }
        let downsamplings = self.encoder_plan.iter().filter(|s| s.stride == 2).count();
        if downsamplings != 4 {
            return Err(Error::Config(format!(
                "encoder_plan must contain exactly 4 stride-2 rows (stem supplies the fifth), found {downsamplings}"
            )));
        }
        Ok(())
    }

    /// Channel count after the width multiplier.
    pub fn scale_channels(&self, channels: usize) -> usize {
        scale_channels(channels, self.width_multiplier)
    }
}

/// `channels · width` rounded up to a multiple of 8, never below 8.
pub fn scale_channels(channels: usize, width: f64) -> usize {
    let scaled = channels as f64 * width / 8.0;
    // guard against 16.000000001-style float noise bumping a full multiple up
    let groups = (scaled - 1e-9).ceil().max(1.0) as usize;
    groups * 8
}
