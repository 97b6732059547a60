//! The tracker model: Siamese backbone, target-aware branch (correlation +
//! transformer encoder/decoder with a single target query), motion-aware
//! branch (compressed search features through encoder blocks), gated fusion
//! with a residual shortcut, and a soft-argmax regression head.

mod net;
mod params;
mod posenc;
mod tracker;

pub use net::{Fwd, Model, ModelOutput, PredBox};
pub use params::{derive_seed, CheckpointMeta, ModelParams, ParamEntry, ParamKind};
pub use posenc::sinusoidal_2d;
pub use tracker::{restore_box, StepAux, Tracker, TrackerState, SEARCH_CONTEXT, TEMPLATE_CONTEXT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One backbone stage: 3x3 conv (given stride, padding 1) + BN + ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

/// Branch toggles used by the ablation studies. The default enables
/// everything (the full model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Motion branch on; when off, fusion gates the target response by
    /// itself instead of by motion features.
    pub use_man: bool,
    /// Residual shortcut from the target-branch encoder into the fusion
    /// output.
    pub tfm_shortcut: bool,
    /// Self-attention inside target-branch blocks (encoder and decoder
    /// query self-attention).
    pub tan_self_attention: bool,
    /// Self-attention inside motion-branch encoder blocks.
    pub man_self_attention: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_man: true,
            tfm_shortcut: true,
            tan_self_attention: true,
            man_self_attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input planes: 1 for event frames, bin count for voxel grids.
    pub input_channels: usize,
    /// Template crop resolution in pixels (square).
    pub template_size: usize,
    /// Search crop resolution in pixels (square).
    pub search_size: usize,
    /// Backbone stages; the product of strides is the total stride, the
    /// last channel count is the feature width C.
    pub backbone: Vec<StageConfig>,
    /// Transformer width d (the bottleneck squeezes C down to this).
    pub embed_dim: usize,
    pub heads: usize,
    pub tan_encoders: usize,
    pub tan_decoders: usize,
    pub man_encoders: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Add fixed 2-D sinusoidal positions to encoder tokens.
    pub positional_encoding: bool,
    /// Stride of the motion-branch 3x3 compression conv. Its output grid
    /// must equal the correlation grid, which fusion requires.
    pub man_stride: usize,
    /// Odd cross-correlation kernel size; `None` picks the largest odd
    /// size that fits the template feature grid.
    pub template_kernel: Option<usize>,
    /// Hidden channel schedule of the regression-head conv stacks.
    pub head_channels: Vec<usize>,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    /// Desk-scale defaults: 48/96 crops, stride 8, C=32, d=32, 2 heads.
    pub fn desk() -> Self {
        Self {
            input_channels: 1,
            template_size: 48,
            search_size: 96,
            backbone: vec![
                StageConfig {
                    channels: 8,
                    stride: 2,
                },
                StageConfig {
                    channels: 16,
                    stride: 2,
                },
                StageConfig {
                    channels: 32,
                    stride: 2,
                },
            ],
            embed_dim: 32,
            heads: 2,
            tan_encoders: 3,
            tan_decoders: 3,
            man_encoders: 2,
            ffn_hidden: 128,
            dropout: 0.1,
            positional_encoding: true,
            man_stride: 1,
            template_kernel: None,
            head_channels: vec![16],
            ablation: AblationConfig::default(),
        }
    }

    /// Full-scale configuration: 17x17 search features at 128 channels,
    /// 4 heads of width 128, FFN 2048. Crop sizes are the nearest
    /// stride-divisible equivalents of the reference resolutions.
    pub fn paper_scale() -> Self {
        Self {
            input_channels: 1,
            template_size: 128,
            search_size: 272,
            backbone: vec![
                StageConfig {
                    channels: 32,
                    stride: 2,
                },
                StageConfig {
                    channels: 64,
                    stride: 2,
                },
                StageConfig {
                    channels: 128,
                    stride: 2,
                },
                StageConfig {
                    channels: 128,
                    stride: 2,
                },
            ],
            embed_dim: 128,
            heads: 4,
            tan_encoders: 3,
            tan_decoders: 3,
            man_encoders: 2,
            ffn_hidden: 2048,
            dropout: 0.1,
            positional_encoding: true,
            man_stride: 1,
            template_kernel: None,
            head_channels: vec![64, 32, 16],
            ablation: AblationConfig::default(),
        }
    }

    /// Total downsampling from input pixels to feature cells.
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|s| s.stride).product()
    }

    /// Backbone output channels C.
    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map(|s| s.channels).unwrap_or(0)
    }

    /// Search feature grid extent G.
    pub fn search_grid(&self) -> usize {
        self.search_size / self.stride()
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.stride()
    }

    /// Effective correlation kernel size K (odd).
    pub fn kernel_size(&self) -> usize {
        match self.template_kernel {
            Some(k) => k,
            None => {
                let g = self.template_grid();
                if g % 2 == 1 {
                    g
                } else {
                    g.saturating_sub(1)
                }
            }
        }
    }

    /// Motion-branch output grid for a 3x3 pad-1 conv at `man_stride`.
    pub fn man_grid(&self) -> usize {
        let g = self.search_grid();
        (g + 2 - 3) / self.man_stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Model(msg));
        if self.backbone.is_empty() {
            return fail("backbone needs at least one stage".into());
        }
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        let s = self.stride();
        if self.template_size == 0 || self.template_size % s != 0 {
            return fail(format!(
                "template size {} must be a positive multiple of stride {s}",
                self.template_size
            ));
        }
        if self.search_size == 0 || self.search_size % s != 0 {
            return fail(format!(
                "search size {} must be a positive multiple of stride {s}",
                self.search_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed dim {} must divide evenly into {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.positional_encoding && self.embed_dim % 4 != 0 {
            return fail("positional encoding needs embed_dim divisible by 4".into());
        }
        let k = self.kernel_size();
        if k == 0 || k % 2 == 0 || k > self.template_grid() {
            return fail(format!(
                "correlation kernel {k} must be odd and fit the {}-cell template grid",
                self.template_grid()
            ));
        }
        if self.man_stride == 0 {
            return fail("man_stride must be positive".into());
        }
        if self.man_grid() != self.search_grid() {
            return fail(format!(
                "motion grid {} must equal correlation grid {} (required by fusion); \
                 adjust man_stride",
                self.man_grid(),
                self.search_grid()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_shapes() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.stride(), 8);
        assert_eq!(cfg.feature_channels(), 32);
        assert_eq!(cfg.search_grid(), 12);
        assert_eq!(cfg.template_grid(), 6);
        assert_eq!(cfg.kernel_size(), 5);
    }

    #[test]
    fn paper_scale_config_echoes_reference_feature_map() {
        let cfg = ModelConfig::paper_scale();
        cfg.validate().unwrap();
        // search features come out as 128 x 17 x 17
        assert_eq!(cfg.feature_channels(), 128);
        assert_eq!(cfg.search_grid(), 17);
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.embed_dim, 128);
        assert_eq!(cfg.ffn_hidden, 2048);
        assert_eq!(cfg.tan_encoders, 3);
        assert_eq!(cfg.tan_decoders, 3);
        assert_eq!(cfg.man_encoders, 2);
    }

    #[test]
    fn grid_mismatch_is_rejected_at_validation() {
        let mut cfg = ModelConfig::desk();
        cfg.man_stride = 2; // 12 -> 6, no longer equal to the 12-cell grid
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.template_kernel = Some(4);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = ModelConfig::desk();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
