//! Declarative model description: backbone widths, mutual-learning settings,
//! edge-module settings, supervision schedule variant and loss weights.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution layers per encoder block, fixed by the VGG-16 layout. The
/// per-block feature indexing of the mutual-learning modules depends on it.
pub const CONVS_PER_BLOCK: [usize; 5] = [2, 2, 3, 3, 3];

/// Number of encoder blocks including the final pooled stage.
pub const NUM_BLOCKS: usize = 6;

/// Number of edge modules (attached to the first three blocks).
pub const NUM_EDGE_MODULES: usize = 3;

/// Number of decoder blocks.
pub const NUM_DECODER_BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// Fan-in-scaled random initialization (He normal), seeded.
    #[default]
    Random,
    /// Load backbone convolution weights from a parameter archive keyed
    /// `block{i}.conv{j}.weight|bias`.
    ExternalWeightsFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the five convolution blocks.
    pub block_widths: [usize; 5],
    /// Square input resolution; must be divisible by 32 (five pooling stages).
    pub input_size: usize,
    pub init_policy: InitPolicy,
    /// Archive path used when `init_policy` is `ExternalWeightsFile`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "block widths must be positive, got {:?}",
                self.block_widths
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.init_policy == InitPolicy::ExternalWeightsFile && self.weights_file.is_none() {
            return Err(Error::Config(
                "init policy external-weights-file requires weights_file".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    /// Student branches per mutual-learning module.
    pub k: usize,
    /// First-conv kernel size per block; deeper blocks get larger kernels.
    pub kernel_size_per_block: [usize; 6],
    /// First-conv dilation per block; deeper blocks get larger dilation.
    pub dilation_per_block: [usize; 6],
    pub hidden_channels: usize,
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("student count K must be >= 1".into()));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("hidden channels must be positive".into()));
        }
        for (name, xs) in [
            ("kernel sizes", &self.kernel_size_per_block),
            ("dilations", &self.dilation_per_block),
        ] {
            if xs.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config(format!(
                    "{name} must be non-decreasing toward deeper blocks, got {xs:?}"
                )));
            }
        }
        if self.kernel_size_per_block.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.dilation_per_block.iter().any(|&d| d == 0) {
            return Err(Error::Config("dilations must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the eleven supervised heads map to ground-truth kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleVariant {
    /// Contour supervision on the three shallow encoder heads, masks on the
    /// deep three; decoder alternates mask/contour/mask/contour/mask.
    #[default]
    Intertwined,
    /// Every decoder head gets mask supervision; the first two decoder heads
    /// additionally get contour supervision.
    Revised,
    /// Mask supervision everywhere (the ablation baseline).
    AllMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub theta_s: f64,
    pub theta_e: f64,
    pub theta_m: f64,
    pub r_s: [f64; 6],
    pub r_e: [f64; 3],
    pub r_mlm: [f64; 6],
    pub r_dec: [f64; 5],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            theta_s: 0.7,
            theta_e: 0.2,
            theta_m: 0.1,
            r_s: [1.0; 6],
            r_e: [1.0; 3],
            r_mlm: [1.0; 6],
            r_dec: [1.0; 5],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .r_s
            .iter()
            .chain(&self.r_e)
            .chain(&self.r_mlm)
            .chain(&self.r_dec)
            .chain([&self.theta_s, &self.theta_e, &self.theta_m]);
        for &w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weights must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mlm: MlmConfig,
    /// Channel width inside each edge module.
    pub em_channels: usize,
    /// Whether the three edge modules (and the merged edge prediction) exist.
    pub use_edge_modules: bool,
    pub schedule: ScheduleVariant,
    pub weights: LossWeights,
}

impl ModelConfig {
    /// Desk-scale preset: 64x64 input, narrow blocks. Gradient checks and
    /// overfit runs finish in minutes on a laptop CPU.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                block_widths: [8, 16, 32, 32, 32],
                input_size: 64,
                init_policy: InitPolicy::Random,
                weights_file: None,
            },
            mlm: MlmConfig {
                k: 3,
                kernel_size_per_block: [3, 3, 3, 5, 5, 5],
                dilation_per_block: [1, 1, 1, 2, 2, 4],
                hidden_channels: 32,
            },
            em_channels: 16,
            use_edge_modules: true,
            schedule: ScheduleVariant::Intertwined,
            weights: LossWeights::default(),
        }
    }

    /// Full-scale preset matching the VGG-16 layout at 256x256.
    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                block_widths: [64, 128, 256, 512, 512],
                input_size: 256,
                init_policy: InitPolicy::Random,
                weights_file: None,
            },
            mlm: MlmConfig {
                k: 3,
                kernel_size_per_block: [3, 3, 3, 5, 5, 5],
                dilation_per_block: [1, 1, 1, 2, 2, 4],
                hidden_channels: 128,
            },
            em_channels: 64,
            use_edge_modules: true,
            schedule: ScheduleVariant::Intertwined,
            weights: LossWeights::default(),
        }
    }

    /// Decoder block width: at least 32 channels, wider if the MLMs are wider.
    pub fn decoder_channels(&self) -> usize {
        self.mlm.hidden_channels.max(32)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.mlm.validate()?;
        self.weights.validate()?;
        if self.em_channels == 0 {
            return Err(Error::Config("edge-module channels must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the feature map each mutual-learning module consumes:
    /// the last convolution of blocks 0-4, the pooled block-4 output for block 5.
    pub fn mlm_input_channels(&self, block: usize) -> usize {
        if block < 5 {
            self.backbone.block_widths[block]
        } else {
            self.backbone.block_widths[4]
        }
    }

    /// Spatial side length of block `i` feature maps.
    pub fn block_size(&self, block: usize) -> usize {
        self.backbone.input_size >> block.min(5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_preset_is_valid() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::full().validate().unwrap();
    }

    #[test]
    fn zero_width_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.backbone.block_widths[0] = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_multiple_of_32_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.backbone.input_size = 48;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decreasing_kernel_schedule_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.mlm.kernel_size_per_block = [5, 3, 3, 5, 5, 5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ModelConfig::tiny();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn block_sizes_follow_pooling_chain() {
        let cfg = ModelConfig::tiny();
        let sizes: Vec<usize> = (0..6).map(|i| cfg.block_size(i)).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4, 2]);
    }
}
