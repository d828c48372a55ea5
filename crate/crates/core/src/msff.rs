//! Multiscale feature fusion.
//!
//! Each encoder level is resampled to all three scales with patch merging
//! (2×2 space-to-channel, halve resolution, double channels) and patch
//! expanding (the inverse), then same-size maps are concatenated across
//! the three groups to give `3C`, `6C` and `12C` channel outputs.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, Conv2d, LayerNorm};
use crate::params::Scope;
use crate::ppe::FeaturePyramid;

/// Slice offsets `(dh, dw)` in concatenation order.
pub const MERGE_OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Space-to-channel rearrangement of a channels-last `(B, H, W, C)` map to
/// `(B, H/2, W/2, 4C)`, slices concatenated in [`MERGE_OFFSETS`] order.
pub fn merge_slices(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("patch merging needs even H and W, got {h}x{w}")));
    }
    let grid = x.contiguous()?.reshape((b, h / 2, 2, w / 2, 2, c))?;
    let slices = MERGE_OFFSETS
        .iter()
        .map(|&(dh, dw)| {
            Ok(grid
                .narrow(2, dh, 1)?
                .narrow(4, dw, 1)?
                .reshape((b, h / 2, w / 2, c))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&slices, 3)?)
}

/// Channel-to-space rearrangement `(B, H, W, 4c) → (B, 2H, 2W, c)`; channel
/// index `(p * 2 + q) * c + k` lands at spatial offset `(p, q)`.
pub fn expand_slices(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(format!("patch expanding needs 4 | channels, got {c4}")));
    }
    let c = c4 / 4;
    Ok(x
        .contiguous()?
        .reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

fn channels_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

fn channels_first(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

/// `(B, C, H, W) → (B, 2C, H/2, W/2)`: slice-concat, LayerNorm(4C), linear 4C→2C.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
    channels: usize,
}

impl PatchMerging {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&scope.pp("norm"), 4 * channels)?,
            reduction: linear(&scope.pp("reduction"), 4 * channels, 2 * channels, false)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        if c != self.channels {
            return Err(Error::shape(format!("patch merging built for {} channels, got {c}", self.channels)));
        }
        let y = merge_slices(&channels_last(x)?)?;
        let y = self.reduction.forward(&self.norm.forward(&y)?)?;
        channels_first(&y)
    }
}

/// `(B, C, H, W) → (B, C/2, 2H, 2W)`: linear C→2C, LayerNorm(2C), then the
/// 2C channels are spread over a 2×2 block as `C/2` channels each.
#[derive(Debug, Clone)]
pub struct PatchExpanding {
    expand: Linear,
    norm: LayerNorm,
    channels: usize,
}

impl PatchExpanding {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::shape(format!("patch expanding needs even channels, got {channels}")));
        }
        Ok(Self {
            expand: linear(&scope.pp("expand"), channels, 2 * channels, false)?,
            norm: LayerNorm::new(&scope.pp("norm"), 2 * channels)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        if c != self.channels {
            return Err(Error::shape(format!("patch expanding built for {} channels, got {c}", self.channels)));
        }
        let y = self.norm.forward(&self.expand.forward(&channels_last(x)?)?)?;
        channels_first(&expand_slices(&y)?)
    }
}

/// Three same-source maps at `(C,H,W)`, `(2C,H/2,W/2)`, `(4C,H/4,W/4)`.
#[derive(Debug, Clone)]
pub struct MultiscaleGroup {
    pub maps: [Tensor; 3],
}

impl MultiscaleGroup {
    pub fn new(maps: [Tensor; 3]) -> Result<Self> {
        let (b, c, h, w) = maps[0].dims4()?;
        for (i, m) in maps.iter().enumerate() {
            let k = 1usize << i;
            let expect = [b, c * k, h / k, w / k];
            if m.dims() != expect {
                return Err(Error::shape(format!(
                    "group entry {i} has shape {:?}, expected {expect:?}",
                    m.dims()
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn shapes(&self) -> [Vec<usize>; 3] {
        self.maps.clone().map(|m| m.dims().to_vec())
    }
}

/// `t1: (B,3C,H,W)`, `t2: (B,6C,H/2,W/2)`, `t3: (B,12C,H/4,W/4)`.
#[derive(Debug, Clone)]
pub struct MsffOutput {
    pub tensors: [Tensor; 3],
}

impl MsffOutput {
    pub fn new(tensors: [Tensor; 3], base_channels: usize) -> Result<Self> {
        for (t, mult) in tensors.iter().zip([3usize, 6, 12]) {
            let c = t.dims4()?.1;
            if c != mult * base_channels {
                return Err(Error::shape(format!(
                    "fused tensor has {c} channels, expected {mult}×{base_channels}"
                )));
            }
        }
        Ok(Self { tensors })
    }
}

#[derive(Debug, Clone)]
pub struct Msff {
    merge: [PatchMerging; 3],
    expand: [PatchExpanding; 3],
    base_channels: usize,
}

impl Msff {
    /// Registers `merge.{0,1,2}` and `expand.{0,1,2}` under `scope`.
    pub fn new(scope: &Scope, base_channels: usize) -> Result<Self> {
        let c = base_channels;
        Ok(Self {
            merge: [
                PatchMerging::new(&scope.pp("merge.0"), c)?,
                PatchMerging::new(&scope.pp("merge.1"), 2 * c)?,
                PatchMerging::new(&scope.pp("merge.2"), 2 * c)?,
            ],
            expand: [
                PatchExpanding::new(&scope.pp("expand.0"), 2 * c)?,
                PatchExpanding::new(&scope.pp("expand.1"), 4 * c)?,
                PatchExpanding::new(&scope.pp("expand.2"), 2 * c)?,
            ],
            base_channels,
        })
    }

    pub fn build_groups(&self, pyr: &FeaturePyramid) -> Result<[MultiscaleGroup; 3]> {
        let [y1, y2, y3] = &pyr.levels;
        if pyr.base_channels() != self.base_channels {
            return Err(Error::shape(format!(
                "MSFF built for C={}, pyramid has C={}",
                self.base_channels,
                pyr.base_channels()
            )));
        }
        let y1_half = self.merge[0].forward(y1)?;
        let g1 = [y1.clone(), y1_half.clone(), self.merge[1].forward(&y1_half)?];
        let g2 = [self.expand[0].forward(y2)?, y2.clone(), self.merge[2].forward(y2)?];
        let y3_up = self.expand[1].forward(y3)?;
        let g3 = [self.expand[2].forward(&y3_up)?, y3_up, y3.clone()];
        Ok([
            MultiscaleGroup::new(g1)?,
            MultiscaleGroup::new(g2)?,
            MultiscaleGroup::new(g3)?,
        ])
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<MsffOutput> {
        fuse_groups(&self.build_groups(pyr)?)
    }
}

/// Concatenates same-size maps across groups along channels, in group order.
pub fn fuse_groups(groups: &[MultiscaleGroup; 3]) -> Result<MsffOutput> {
    let base = groups[0].maps[0].dims4()?.1;
    for g in &groups[1..] {
        if g.shapes() != groups[0].shapes() {
            return Err(Error::shape(format!(
                "group shapes differ: {:?} vs {:?}",
                g.shapes(),
                groups[0].shapes()
            )));
        }
    }
    let mut out = Vec::with_capacity(3);
    for scale in 0..3 {
        let parts: Vec<&Tensor> = groups.iter().map(|g| &g.maps[scale]).collect();
        out.push(Tensor::cat(&parts, 1)?);
    }
    MsffOutput::new(out.try_into().expect("three scales"), base)
}

/// Ablation stand-in: per-level 1×1 convolutions to `3C`, `6C`, `12C`.
#[derive(Debug, Clone)]
pub struct MsffBypass {
    proj: [Conv2d; 3],
    base_channels: usize,
}

impl MsffBypass {
    pub fn new(scope: &Scope, base_channels: usize) -> Result<Self> {
        let c = base_channels;
        Ok(Self {
            proj: [
                conv2d(&scope.pp("0"), c, 3 * c, 1, 1, 0, true)?,
                conv2d(&scope.pp("1"), 2 * c, 6 * c, 1, 1, 0, true)?,
                conv2d(&scope.pp("2"), 4 * c, 12 * c, 1, 1, 0, true)?,
            ],
            base_channels,
        })
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<MsffOutput> {
        let out = [
            self.proj[0].forward(&pyr.levels[0])?,
            self.proj[1].forward(&pyr.levels[1])?,
            self.proj[2].forward(&pyr.levels[2])?,
        ];
        MsffOutput::new(out, self.base_channels)
    }
}
