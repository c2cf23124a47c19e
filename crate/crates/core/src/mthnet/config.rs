use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::YCbCrStandard;

/// Which image planes the network fuses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// RGB of both modalities in, RGB out.
    #[default]
    ThreeChannel,
    /// Luma of both modalities in, luma out; chroma comes from the visible image.
    OneChannel,
}

impl ChannelMode {
    pub fn planes(self) -> usize {
        match self {
            ChannelMode::ThreeChannel => 3,
            ChannelMode::OneChannel => 1,
        }
    }
}

/// Key/value source of the high-level cross-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiaKvSource {
    /// Reconstruction-branch high-level tokens.
    #[default]
    FromRe,
    /// Segmentation-branch low-level tokens.
    FromSeg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub base_width: usize,
    /// Conv blocks per modality stem.
    pub stages: usize,
    pub feat_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { base_width: 8, stages: 2, feat_channels: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MthConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub hia_f_enabled: bool,
    pub channel_mode: ChannelMode,
    pub hia_ch_kv: HiaKvSource,
    /// Side of the mean-pooled patch that becomes one attention token.
    pub token_stride: usize,
    pub mlp_hidden: usize,
}

impl Default for MthConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            classes: 5,
            hia_f_enabled: true,
            channel_mode: ChannelMode::ThreeChannel,
            hia_ch_kv: HiaKvSource::FromRe,
            token_stride: 8,
            mlp_hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mth: MthConfig,
    pub ycbcr: YCbCrStandard,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (b, m) = (&self.backbone, &self.mth);
        if b.base_width == 0 || b.stages == 0 {
            return Err(Error::Config("backbone width and stage count must be positive".into()));
        }
        if b.feat_channels == 0 || b.feat_channels % 2 != 0 {
            return Err(Error::Config(format!("feature channels must be even, got {}", b.feat_channels)));
        }
        if m.heads == 0 || m.embed_dim == 0 || m.embed_dim % m.heads != 0 {
            return Err(Error::Config(format!("embed dim {} not divisible by {} heads", m.embed_dim, m.heads)));
        }
        if m.classes < 2 || m.classes > 255 {
            return Err(Error::Config(format!("class count {} outside [2, 255]", m.classes)));
        }
        if m.token_stride == 0 || m.mlp_hidden == 0 {
            return Err(Error::Config("token stride and MLP width must be positive".into()));
        }
        Ok(())
    }

    /// Compact configuration for gradient checks on tiny images.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig { base_width: 3, stages: 2, feat_channels: 4 },
            mth: MthConfig {
                embed_dim: 4,
                heads: 2,
                classes: 3,
                token_stride: 2,
                mlp_hidden: 4,
                ..MthConfig::default()
            },
            ycbcr: YCbCrStandard::Bt601,
        }
    }
}
