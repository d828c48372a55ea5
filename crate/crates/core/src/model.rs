//! Full networks assembled from the building blocks.
//!
//! Parameter names are hierarchical and stable across stages:
//! `text_encoder.*` and `ppe.*` form the shared encoder, `pretrain.*` holds
//! the Siamese heads, `msff.*` and `upattention.*` the segmentation decoder.

use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::msff::{Msff, MsffBypass, MsffOutput};
use crate::params::Scope;
use crate::ppe::{FeaturePyramid, Ppe, PpeConfig, TransformerToggles};
use crate::text_encoder::{Caption, Embedder, EmbedderConfig, TextEncoder};
use crate::upattention::Cascade;

pub const ENCODER_PREFIXES: [&str; 2] = ["ppe.", "text_encoder."];

pub fn is_encoder_param(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub ppe: PpeConfig,
    /// Caption length `L` after padding/truncation.
    pub text_len: usize,
    pub embedder: EmbedderConfig,
    /// Width `Z` of the Siamese projection.
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ppe: PpeConfig::default(),
            text_len: 32,
            embedder: EmbedderConfig::Toy,
            projection_dim: 256,
        }
    }
}

impl ModelConfig {
    /// Small CPU-friendly preset.
    pub fn toy(image: usize, channels: usize) -> Self {
        Self {
            ppe: PpeConfig::toy(image, channels),
            text_len: 8,
            embedder: EmbedderConfig::Toy,
            projection_dim: 8 * channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ppe.validate()?;
        if self.text_len == 0 {
            return Err(Error::config("text_len must be positive"));
        }
        if self.projection_dim < 4 || !self.projection_dim.is_multiple_of(4) {
            return Err(Error::config("projection_dim must be a positive multiple of 4"));
        }
        Ok(())
    }
}

/// Which blocks are active; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub downvit: bool,
    pub upvit: bool,
    pub msff: bool,
    pub upattention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            downvit: true,
            upvit: true,
            msff: true,
            upattention: true,
        }
    }
}

impl Ablation {
    pub fn toggles(&self) -> TransformerToggles {
        TransformerToggles {
            downvit: self.downvit,
            upvit: self.upvit,
        }
    }
}

/// Text encoder plus prior prompt encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub text: TextEncoder,
    pub ppe: Ppe,
}

impl Encoder {
    pub fn new(root: &Scope, cfg: &ModelConfig, embedder: Arc<dyn Embedder>, ablation: &Ablation) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            text: TextEncoder::new(&root.pp("text_encoder"), embedder, cfg.text_len, cfg.ppe.embed_dims[0])?,
            ppe: Ppe::new(&root.pp("ppe"), &cfg.ppe, cfg.text_len, ablation.toggles())?,
        })
    }

    pub fn forward_t(&self, images: &Tensor, captions: &[Caption], train: bool, exec: Exec) -> Result<FeaturePyramid> {
        let b = images.dim(0)?;
        if captions.len() != b {
            return Err(Error::shape(format!("{} captions for {b} images", captions.len())));
        }
        let text = self.text.encode(captions, images.dtype(), exec)?;
        self.ppe.forward_t(images, text.level(1), train)
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Msff(Msff),
    Bypass(MsffBypass),
}

impl Fusion {
    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<MsffOutput> {
        match self {
            Fusion::Msff(m) => m.forward(pyr),
            Fusion::Bypass(b) => b.forward(pyr),
        }
    }
}

/// Stage-2 network: encoder → multiscale fusion → UpAttention cascade.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub cascade: Cascade,
}

impl Segmenter {
    pub fn new(root: &Scope, cfg: &ModelConfig, embedder: Arc<dyn Embedder>, ablation: &Ablation) -> Result<Self> {
        let encoder = Encoder::new(root, cfg, embedder, ablation)?;
        let c = cfg.ppe.base_channels;
        let fusion = if ablation.msff {
            Fusion::Msff(Msff::new(&root.pp("msff"), c)?)
        } else {
            Fusion::Bypass(MsffBypass::new(&root.pp("msff").pp("bypass"), c)?)
        };
        let cascade = Cascade::new(&root.pp("upattention"), c, ablation.upattention)?;
        Ok(Self {
            encoder,
            fusion,
            cascade,
        })
    }

    /// Pre-sigmoid mask logits `(B, 1, H, W)`.
    pub fn logits_t(&self, images: &Tensor, captions: &[Caption], train: bool, exec: Exec) -> Result<Tensor> {
        self.logits_split(images, captions, train, train, exec)
    }

    /// Like [`Segmenter::logits_t`] with separate train flags, so a frozen
    /// encoder can run on its running statistics while the decoder trains.
    pub fn logits_split(
        &self,
        images: &Tensor,
        captions: &[Caption],
        encoder_train: bool,
        decoder_train: bool,
        exec: Exec,
    ) -> Result<Tensor> {
        let pyr = self.encoder.forward_t(images, captions, encoder_train, exec)?;
        let fused = self.fusion.forward(&pyr)?;
        self.cascade.logits_t(&fused, decoder_train)
    }

    /// Mask probabilities `(B, 1, H, W)`.
    pub fn forward_t(&self, images: &Tensor, captions: &[Caption], train: bool, exec: Exec) -> Result<Tensor> {
        crate::nn::sigmoid(&self.logits_t(images, captions, train, exec)?)
    }
}
