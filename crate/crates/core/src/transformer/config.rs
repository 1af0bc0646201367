use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the video module factorizes attention over space and time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Self-attention among the query frame's tokens only.
    Space,
    /// Spatial self-attention, then cross-attention to every memory token.
    GlobalTimeSpace,
    /// Spatial self-attention, then cross-attention to the memory tokens at
    /// the same spatial position.
    LocalTimeSpace,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [
        AttentionVariant::Space,
        AttentionVariant::GlobalTimeSpace,
        AttentionVariant::LocalTimeSpace,
    ];

    pub fn uses_memory(self) -> bool {
        !matches!(self, AttentionVariant::Space)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Space => "space",
            AttentionVariant::GlobalTimeSpace => "global_time_space",
            AttentionVariant::LocalTimeSpace => "local_time_space",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "space" => Ok(AttentionVariant::Space),
            "global" | "global_time_space" | "globaltimespace" => {
                Ok(AttentionVariant::GlobalTimeSpace)
            }
            "local" | "local_time_space" | "localtimespace" => Ok(AttentionVariant::LocalTimeSpace),
            other => Err(Error::Config(format!(
                "unknown attention variant {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoModuleConfig {
    /// Backbone channels `C`.
    pub channels: usize,
    /// Inner embedding width `d`.
    pub dim: usize,
    /// Memory capacity `S` in frames.
    pub memory: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
    /// Feature grid height.
    pub height: usize,
    /// Feature grid width.
    pub width: usize,
}

impl Default for VideoModuleConfig {
    fn default() -> Self {
        Self {
            channels: 2048,
            dim: 1024,
            memory: 0,
            heads: 1,
            variant: AttentionVariant::Space,
            height: 32,
            width: 64,
        }
    }
}

impl VideoModuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dim == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "channels, dim and grid extents must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.memory == 0 && self.variant.uses_memory() {
            return Err(Error::Config(format!(
                "variant {} needs a memory of at least one frame",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Key comparisons per query token, both attention stages summed.
pub fn comparison_count(
    variant: AttentionVariant,
    height: usize,
    width: usize,
    frames: usize,
) -> usize {
    let spatial = height * width;
    match variant {
        AttentionVariant::Space => spatial,
        AttentionVariant::GlobalTimeSpace => spatial + spatial * frames,
        AttentionVariant::LocalTimeSpace => spatial + frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_at_stride_32_resolution() {
        assert_eq!(comparison_count(AttentionVariant::Space, 32, 64, 0), 2048);
        assert_eq!(
            comparison_count(AttentionVariant::GlobalTimeSpace, 32, 64, 1),
            4096
        );
        assert_eq!(
            comparison_count(AttentionVariant::LocalTimeSpace, 32, 64, 4),
            2052
        );
        assert_eq!(
            comparison_count(AttentionVariant::LocalTimeSpace, 4, 4, 3),
            19
        );
        assert_eq!(
            comparison_count(AttentionVariant::GlobalTimeSpace, 4, 4, 2) - 16,
            32
        );
    }

    #[test]
    fn validation() {
        let mut c = VideoModuleConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!((c.channels, c.dim, c.heads), (2048, 1024, 1));
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.variant = AttentionVariant::LocalTimeSpace;
        assert!(c.validate().is_err());
        c.memory = 2;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_variant_names() {
        assert_eq!(
            "local".parse::<AttentionVariant>().unwrap(),
            AttentionVariant::LocalTimeSpace
        );
        assert_eq!(
            "Global-Time-Space".parse::<AttentionVariant>().unwrap(),
            AttentionVariant::GlobalTimeSpace
        );
        assert!("axial".parse::<AttentionVariant>().is_err());
    }
}
