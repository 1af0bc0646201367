use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_WINDOWS;
use crate::panoptic::CenterParams;
use crate::synth::CorruptionSpec;
use crate::tracking::DEFAULT_IOU_THRESHOLD;
use crate::transformer::{AttentionVariant, VideoModuleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    Gt,
    BlockMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    /// Backbone, video module, heads and post-processing.
    ToyHeads,
    /// Ground-truth masks with per-frame local ids.
    GtInject,
    /// Ground truth passed through [`crate::synth::corrupt`].
    GtCorrupt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub variant: AttentionVariant,
    /// Memory length `S`.
    pub memory: usize,
    pub dim: usize,
    pub heads: usize,
    pub channels: usize,
    pub stride: usize,
    pub tracking: bool,
    pub tracker_threshold: f64,
    pub flow_source: FlowSource,
    pub block_patch: usize,
    pub block_search: usize,
    pub prediction: PredictionSource,
    pub corruption: CorruptionSpec,
    pub centers: CenterParams,
    pub model_seed: u64,
    pub backbone_seed: u64,
    pub corruption_seed: u64,
    pub windows: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::Space,
            memory: 0,
            dim: 16,
            heads: 2,
            channels: 16,
            stride: 4,
            tracking: true,
            tracker_threshold: DEFAULT_IOU_THRESHOLD,
            flow_source: FlowSource::Gt,
            block_patch: 7,
            block_search: 3,
            prediction: PredictionSource::ToyHeads,
            corruption: CorruptionSpec {
                dropout: 0.1,
                erosion: 1,
            },
            centers: CenterParams::default(),
            model_seed: 0,
            backbone_seed: 0,
            corruption_seed: 0,
            windows: DEFAULT_WINDOWS.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.memory == 0) != (self.variant == AttentionVariant::Space) {
            return Err(Error::Config(format!(
                "memory S = {} is inconsistent with variant {}; S = 0 exactly when the variant is space",
                self.memory, self.variant
            )));
        }
        if self.stride == 0 || self.channels == 0 {
            return Err(Error::Config("stride and channels must be positive".into()));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.tracker_threshold) {
            return Err(Error::Config(format!(
                "tracker threshold {} outside [0, 1)",
                self.tracker_threshold
            )));
        }
        if self.block_patch.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "block patch {} must be odd",
                self.block_patch
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1]",
                self.corruption.dropout
            )));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config(
                "window sizes must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    /// Checks against a frame size and returns the video module configuration.
    pub fn module_config(&self, height: usize, width: usize) -> Result<VideoModuleConfig> {
        self.validate()?;
        if !height.is_multiple_of(self.stride) || !width.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "stride {} does not divide {height}×{width}",
                self.stride
            )));
        }
        let cfg = VideoModuleConfig {
            channels: self.channels,
            dim: self.dim,
            memory: self.memory,
            heads: self.heads,
            variant: self.variant,
            height: height / self.stride,
            width: width / self.stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window sizes usable on a sequence of `frames` frames.
    pub fn windows_for(&self, frames: usize) -> Result<Vec<usize>> {
        match self.windows.iter().find(|&&k| k > frames) {
            Some(k) => Err(Error::Config(format!(
                "window {k} longer than the {frames}-frame sequence"
            ))),
            None => Ok(self.windows.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_and_variant_must_agree() {
        let ok = PipelineConfig::default();
        ok.validate().unwrap();
        let bad = PipelineConfig {
            memory: 2,
            ..ok.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = PipelineConfig {
            variant: AttentionVariant::LocalTimeSpace,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let good = PipelineConfig {
            variant: AttentionVariant::LocalTimeSpace,
            memory: 3,
            ..ok
        };
        good.validate().unwrap();
    }

    #[test]
    fn stride_must_divide_frame() {
        let c = PipelineConfig::default();
        assert_eq!(c.module_config(32, 64).unwrap().width, 16);
        assert!(c.module_config(30, 64).is_err());
    }

    #[test]
    fn json_round_trip_with_partial_input() {
        let c: PipelineConfig = serde_json::from_str(
            r#"{"variant":"local_time_space","memory":2,"flow_source":"block_match"}"#,
        )
        .unwrap();
        assert_eq!(c.variant, AttentionVariant::LocalTimeSpace);
        assert_eq!(c.flow_source, FlowSource::BlockMatch);
        assert_eq!(c.heads, PipelineConfig::default().heads);
        let back: PipelineConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
