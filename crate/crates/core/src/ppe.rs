//! Prior prompt encoder.
//!
//! A three-level CNN image pyramid feeds a U-shaped stack of transformer
//! layers: DownViT 1 adds the level-1 text features to the image patches,
//! DownViT 2 and 3 concatenate with the level above, UpViT 3..1 walk back
//! up adding the level below, and a per-level fusion block reshapes the
//! tokens to a map, upsamples, and adds the CNN features back.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, resize_bilinear, Conv2d, ConvBn1d, ConvBn2d, TransformerBlock};
use crate::params::Scope;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpeConfig {
    pub base_channels: usize,
    pub image_size: [usize; 2],
    pub patch_sizes: [usize; 3],
    pub embed_dims: [usize; 3],
    pub heads: [usize; 3],
    pub mlp_ratio: f64,
    pub dropout: f64,
}

impl Default for PpeConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            image_size: [224, 224],
            patch_sizes: [16, 8, 4],
            embed_dims: [64, 128, 256],
            heads: [2, 4, 8],
            mlp_ratio: 4.0,
            dropout: 0.1,
        }
    }
}

impl PpeConfig {
    /// Small preset: widths `(c, 2c, 4c)`, patches `(16, 8, 4)`, no dropout.
    pub fn toy(image: usize, channels: usize) -> Self {
        Self {
            base_channels: channels,
            image_size: [image, image],
            patch_sizes: [16, 8, 4],
            embed_dims: [channels, 2 * channels, 4 * channels],
            heads: [1, 2, 4],
            mlp_ratio: 2.0,
            dropout: 0.0,
        }
    }

    /// Channels of `X_1, X_2, X_3` (and of `y_1, y_2, y_3`).
    pub fn level_channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn level_sizes(&self) -> [(usize, usize); 3] {
        let [h, w] = self.image_size;
        [(h, w), (h / 2, w / 2), (h / 4, w / 4)]
    }

    /// Token grid shared by all three transformer levels.
    pub fn token_grid(&self) -> (usize, usize) {
        let (h, w) = self.level_sizes()[0];
        (h / self.patch_sizes[0], w / self.patch_sizes[0])
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if self.base_channels == 0 || h == 0 || w == 0 {
            return Err(Error::config("base_channels and image_size must be positive"));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!("image_size {h}x{w} must be multiples of 16")));
        }
        let mut grids = Vec::new();
        for (lvl, ((lh, lw), p)) in self.level_sizes().iter().zip(self.patch_sizes).enumerate() {
            if p == 0 || lh % p != 0 || lw % p != 0 {
                return Err(Error::config(format!(
                    "level {} map {lh}x{lw} not divisible by patch size {p}",
                    lvl + 1
                )));
            }
            grids.push((lh / p, lw / p));
        }
        if grids.iter().any(|g| *g != grids[0]) {
            return Err(Error::config(format!(
                "patch sizes {:?} give unequal token grids {grids:?}",
                self.patch_sizes
            )));
        }
        for (d, heads) in self.embed_dims.iter().zip(self.heads) {
            if heads == 0 || d % heads != 0 {
                return Err(Error::config(format!(
                    "embed width {d} not divisible by {heads} heads"
                )));
            }
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::config("base_channels must be even for patch expanding"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.mlp_ratio <= 0.0 {
            return Err(Error::config("dropout must be in [0, 1) and mlp_ratio positive"));
        }
        Ok(())
    }
}

/// Transformer stages that may be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerToggles {
    pub downvit: bool,
    pub upvit: bool,
}

impl Default for TransformerToggles {
    fn default() -> Self {
        Self {
            downvit: true,
            upvit: true,
        }
    }
}

/// `[y1, y2, y3]` at `(C,H,W)`, `(2C,H/2,W/2)`, `(4C,H/4,W/4)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        let (b, c, h, w) = levels[0].dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("pyramid base {h}x{w} not divisible by 4")));
        }
        for (i, t) in levels.iter().enumerate() {
            let k = 1usize << i;
            let expect = [b, c * k, h / k, w / k];
            if t.dims() != expect {
                return Err(Error::shape(format!(
                    "pyramid level {} has shape {:?}, expected {expect:?}",
                    i + 1,
                    t.dims()
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn base_channels(&self) -> usize {
        self.levels[0].dims()[1]
    }
}

/// Tokens `(B, N, D)` plus the `(h, w)` grid they came from.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub data: Tensor,
    pub grid: (usize, usize),
}

impl PatchSequence {
    pub fn new(data: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (_, n, _) = data.dims3()?;
        if grid.0 * grid.1 != n {
            return Err(Error::shape(format!(
                "{n} tokens do not fill a {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self { data, grid })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn with_data(&self, data: Tensor) -> Self {
        Self {
            data,
            grid: self.grid,
        }
    }
}

/// ConvBN → DownBlock → DownBlock.
#[derive(Debug, Clone)]
pub struct ImageBranch {
    stem: ConvBn2d,
    down1: ConvBn2d,
    down2: ConvBn2d,
}

impl ImageBranch {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            stem: ConvBn2d::new(&scope.pp("stem"), 3, channels, 3)?,
            down1: ConvBn2d::new(&scope.pp("down1"), channels, 2 * channels, 3)?,
            down2: ConvBn2d::new(&scope.pp("down2"), 2 * channels, 4 * channels, 3)?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<[Tensor; 3]> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "image branch needs (B,3,H,W) with H,W divisible by 4, got {:?}",
                x.dims()
            )));
        }
        let x1 = self.stem.forward_t(x, train)?;
        let x2 = self.down1.forward_t(&x1, train)?.max_pool2d(2)?;
        let x3 = self.down2.forward_t(&x2, train)?.max_pool2d(2)?;
        Ok([x1, x2, x3])
    }
}

/// Strided-convolution patch embedding.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    proj: Conv2d,
    patch: usize,
}

impl PatchEmbedding {
    pub fn new(scope: &Scope, in_c: usize, dim: usize, patch: usize) -> Result<Self> {
        Ok(Self {
            proj: conv2d(&scope.pp("proj"), in_c, dim, patch, patch, 0, true)?,
            patch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<PatchSequence> {
        let (_, _, h, w) = x.dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} map not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        let y = self.proj.forward(x)?;
        let (_, _, gh, gw) = y.dims4()?;
        let tokens = y.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        PatchSequence::new(tokens, (gh, gw))
    }
}

/// DownViT at level 1: patches plus aligned text, then one transformer layer.
#[derive(Debug, Clone)]
pub struct DownVitFirst {
    patch: PatchEmbedding,
    text_proj: ConvBn1d,
    align: Linear,
    block: TransformerBlock,
    text_len: usize,
    dim: usize,
}

impl DownVitFirst {
    pub fn new(scope: &Scope, cfg: &PpeConfig, text_len: usize) -> Result<Self> {
        let d = cfg.embed_dims[0];
        let (gh, gw) = cfg.token_grid();
        Ok(Self {
            patch: PatchEmbedding::new(&scope.pp("patch"), cfg.base_channels, d, cfg.patch_sizes[0])?,
            text_proj: ConvBn1d::new(&scope.pp("text_proj"), d, d)?,
            align: linear(&scope.pp("align"), text_len, gh * gw, false)?,
            block: TransformerBlock::new(&scope.pp("block"), d, cfg.heads[0], cfg.mlp_ratio, cfg.dropout)?,
            text_len,
            dim: d,
        })
    }

    pub fn block(&self) -> &TransformerBlock {
        &self.block
    }

    /// Text features `(B, L, D1)` mapped onto the patch tokens `(B, N, D1)`.
    pub fn text_tokens(&self, text1: &Tensor, train: bool) -> Result<Tensor> {
        let (_, l, d) = text1.dims3()?;
        if l != self.text_len || d != self.dim {
            return Err(Error::config(format!(
                "level-1 text features {:?} do not match (B, {}, {})",
                text1.dims(),
                self.text_len,
                self.dim
            )));
        }
        let t = self.text_proj.forward_t(text1, train)?;
        let t = self.align.forward(&t.transpose(1, 2)?.contiguous()?)?;
        Ok(t.transpose(1, 2)?.contiguous()?)
    }

    /// `Y = X_p + ConvBN(text)` before any transformer layer.
    pub fn fused_input(&self, x1: &Tensor, text1: &Tensor, train: bool) -> Result<PatchSequence> {
        let xp = self.patch.forward(x1)?;
        let t = self.text_tokens(text1, train)?;
        let y = (&xp.data + t)?;
        Ok(xp.with_data(y))
    }

    pub fn forward_t(&self, x1: &Tensor, text1: &Tensor, train: bool, enabled: bool) -> Result<PatchSequence> {
        let y = self.fused_input(x1, text1, train)?;
        if !enabled {
            return Ok(y);
        }
        let out = self.block.forward_t(&y.data, train)?;
        Ok(y.with_data(out))
    }
}

/// DownViT at levels 2 and 3.
#[derive(Debug, Clone)]
pub struct DownVitNext {
    patch: PatchEmbedding,
    block: TransformerBlock,
    conv_bn: ConvBn1d,
    project: ConvBn1d,
}

impl DownVitNext {
    pub fn new(scope: &Scope, cfg: &PpeConfig, level: usize) -> Result<Self> {
        assert!(level == 2 || level == 3, "DownVitNext covers levels 2 and 3");
        let i = level - 1;
        let d = cfg.embed_dims[i];
        let d_prev = cfg.embed_dims[i - 1];
        let c = cfg.level_channels()[i];
        Ok(Self {
            patch: PatchEmbedding::new(&scope.pp("patch"), c, d, cfg.patch_sizes[i])?,
            block: TransformerBlock::new(&scope.pp("block"), d, cfg.heads[i], cfg.mlp_ratio, cfg.dropout)?,
            conv_bn: ConvBn1d::new(&scope.pp("conv_bn"), d, d)?,
            project: ConvBn1d::new(&scope.pp("project"), d + d_prev, d)?,
        })
    }

    pub fn block(&self) -> &TransformerBlock {
        &self.block
    }

    pub fn forward_t(&self, x: &Tensor, prev: &PatchSequence, train: bool, enabled: bool) -> Result<PatchSequence> {
        let xp = self.patch.forward(x)?;
        if xp.tokens() != prev.tokens() {
            return Err(Error::shape(format!(
                "DownViT token mismatch: {} patches vs {} tokens from the level above",
                xp.tokens(),
                prev.tokens()
            )));
        }
        if !enabled {
            return Ok(xp);
        }
        let y = self.block.forward_t(&xp.data, train)?;
        let y = self.conv_bn.forward_t(&y, train)?;
        let y = Tensor::cat(&[&y, &prev.data], 2)?;
        let y = self.project.forward_t(&y, train)?;
        Ok(xp.with_data(y))
    }
}

/// Bottom UpViT: transformer only.
#[derive(Debug, Clone)]
pub struct UpVitBottom {
    block: TransformerBlock,
}

impl UpVitBottom {
    pub fn new(scope: &Scope, cfg: &PpeConfig) -> Result<Self> {
        Ok(Self {
            block: TransformerBlock::new(&scope.pp("block"), cfg.embed_dims[2], cfg.heads[2], cfg.mlp_ratio, cfg.dropout)?,
        })
    }

    pub fn block(&self) -> &TransformerBlock {
        &self.block
    }

    pub fn forward_t(&self, y3: &PatchSequence, train: bool) -> Result<PatchSequence> {
        Ok(y3.with_data(self.block.forward_t(&y3.data, train)?))
    }
}

/// UpViT at levels 1 and 2: `transformer(Y_i) + ConvBN(Y_below)`.
#[derive(Debug, Clone)]
pub struct UpVit {
    block: TransformerBlock,
    conv_bn: ConvBn1d,
}

impl UpVit {
    pub fn new(scope: &Scope, cfg: &PpeConfig, level: usize) -> Result<Self> {
        assert!(level == 1 || level == 2, "UpVit covers levels 1 and 2");
        let i = level - 1;
        let d = cfg.embed_dims[i];
        Ok(Self {
            block: TransformerBlock::new(&scope.pp("block"), d, cfg.heads[i], cfg.mlp_ratio, cfg.dropout)?,
            conv_bn: ConvBn1d::new(&scope.pp("conv_bn"), cfg.embed_dims[i + 1], d)?,
        })
    }

    pub fn block(&self) -> &TransformerBlock {
        &self.block
    }

    pub fn forward_t(&self, y: &PatchSequence, below: &PatchSequence, train: bool) -> Result<PatchSequence> {
        if y.tokens() != below.tokens() {
            return Err(Error::shape(format!(
                "UpViT token mismatch: {} vs {}",
                y.tokens(),
                below.tokens()
            )));
        }
        let main = self.block.forward_t(&y.data, train)?;
        let skip = self.conv_bn.forward_t(&below.data, train)?;
        Ok(y.with_data((main + skip)?))
    }
}

/// Token grid → map → upsample → ConvBN → `+ X_i`.
#[derive(Debug, Clone)]
pub struct SingleScaleFusion {
    conv_bn: ConvBn2d,
}

impl SingleScaleFusion {
    pub fn new(scope: &Scope, dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            conv_bn: ConvBn2d::new(&scope.pp("conv_bn"), dim, channels, 3)?,
        })
    }

    pub fn forward_t(&self, y: &PatchSequence, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, n, d) = y.data.dims3()?;
        let (gh, gw) = y.grid;
        if gh * gw != n {
            return Err(Error::shape(format!("{n} tokens cannot form a {gh}x{gw} map")));
        }
        let (_, _, h, w) = x.dims4()?;
        let map = y.data.transpose(1, 2)?.contiguous()?.reshape((b, d, gh, gw))?;
        let up = resize_bilinear(&map, h, w)?;
        let fused = self.conv_bn.forward_t(&up, train)?;
        if fused.dims() != x.dims() {
            return Err(Error::shape(format!(
                "fusion output {:?} does not match image features {:?}",
                fused.dims(),
                x.dims()
            )));
        }
        Ok((fused + x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Ppe {
    config: PpeConfig,
    toggles: TransformerToggles,
    pub image: ImageBranch,
    pub down1: DownVitFirst,
    pub down2: DownVitNext,
    pub down3: DownVitNext,
    pub up3: UpVitBottom,
    pub up2: UpVit,
    pub up1: UpVit,
    pub fuse: [SingleScaleFusion; 3],
}

/// Every intermediate of one encoder pass.
#[derive(Debug, Clone)]
pub struct PpeTrace {
    pub image: [Tensor; 3],
    pub down: [PatchSequence; 3],
    pub up: [PatchSequence; 3],
    pub pyramid: FeaturePyramid,
}

impl Ppe {
    pub fn new(scope: &Scope, config: &PpeConfig, text_len: usize, toggles: TransformerToggles) -> Result<Self> {
        config.validate()?;
        let ch = config.level_channels();
        let d = config.embed_dims;
        Ok(Self {
            config: config.clone(),
            toggles,
            image: ImageBranch::new(&scope.pp("image"), config.base_channels)?,
            down1: DownVitFirst::new(&scope.pp("down.1"), config, text_len)?,
            down2: DownVitNext::new(&scope.pp("down.2"), config, 2)?,
            down3: DownVitNext::new(&scope.pp("down.3"), config, 3)?,
            up3: UpVitBottom::new(&scope.pp("up.3"), config)?,
            up2: UpVit::new(&scope.pp("up.2"), config, 2)?,
            up1: UpVit::new(&scope.pp("up.1"), config, 1)?,
            fuse: [
                SingleScaleFusion::new(&scope.pp("fuse.1"), d[0], ch[0])?,
                SingleScaleFusion::new(&scope.pp("fuse.2"), d[1], ch[1])?,
                SingleScaleFusion::new(&scope.pp("fuse.3"), d[2], ch[2])?,
            ],
        })
    }

    pub fn config(&self) -> &PpeConfig {
        &self.config
    }

    pub fn toggles(&self) -> TransformerToggles {
        self.toggles
    }

    pub fn trace(&self, x_img: &Tensor, text1: &Tensor, train: bool) -> Result<PpeTrace> {
        let (_, _, h, w) = x_img.dims4()?;
        if [h, w] != self.config.image_size {
            return Err(Error::shape(format!(
                "image is {h}x{w}, encoder configured for {:?}",
                self.config.image_size
            )));
        }
        let on = self.toggles;
        let [x1, x2, x3] = self.image.forward_t(x_img, train)?;
        let d1 = self.down1.forward_t(&x1, text1, train, on.downvit)?;
        let d2 = self.down2.forward_t(&x2, &d1, train, on.downvit)?;
        let d3 = self.down3.forward_t(&x3, &d2, train, on.downvit)?;
        let (u1, u2, u3) = if on.upvit {
            let u3 = self.up3.forward_t(&d3, train)?;
            let u2 = self.up2.forward_t(&d2, &u3, train)?;
            let u1 = self.up1.forward_t(&d1, &u2, train)?;
            (u1, u2, u3)
        } else {
            (d1.clone(), d2.clone(), d3.clone())
        };
        let y1 = self.fuse[0].forward_t(&u1, &x1, train)?;
        let y2 = self.fuse[1].forward_t(&u2, &x2, train)?;
        let y3 = self.fuse[2].forward_t(&u3, &x3, train)?;
        Ok(PpeTrace {
            image: [x1, x2, x3],
            down: [d1, d2, d3],
            up: [u1, u2, u3],
            pyramid: FeaturePyramid::new([y1, y2, y3])?,
        })
    }

    /// `(y1, y2, y3)` from an image batch and its level-1 text features.
    pub fn forward_t(&self, x_img: &Tensor, text1: &Tensor, train: bool) -> Result<FeaturePyramid> {
        Ok(self.trace(x_img, text1, train)?.pyramid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_with_14x14_grid() {
        let cfg = PpeConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.token_grid(), (14, 14));
    }

    #[test]
    fn unequal_token_grids_are_rejected() {
        let cfg = PpeConfig {
            patch_sizes: [16, 16, 4],
            ..PpeConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PpeConfig {
            image_size: [40, 40],
            ..PpeConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_presets_validate() {
        for (h, c) in [(32, 4), (64, 8), (64, 4)] {
            PpeConfig::toy(h, c).validate().unwrap();
        }
    }
}
