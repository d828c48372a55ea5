//! Attention-gated upsampling decoder.
//!
//! One block takes a fine map and a coarse map at half its resolution. The
//! coarse map is upsampled; the fine map's global average and global max
//! descriptors are summed and broadcast; a pointwise gate computed from
//! `[fine, upsampled coarse, descriptor]` rescales the fine map, which is
//! then merged with the upsampled coarse map by two ConvBN layers. Two
//! blocks run in cascade and a 1×1 head produces the mask probabilities.

use candle_core::{Module, Tensor};

use crate::error::{Error, Result};
use crate::msff::MsffOutput;
use crate::nn::{conv2d, global_avg_pool, global_max_pool, resize_bilinear, sigmoid, Conv2d, ConvBn2d};
use crate::params::Scope;

/// `GAP(x) + GMP(x)`, shape `(B, C, 1, 1)`.
pub fn pooled_descriptor(x: &Tensor) -> Result<Tensor> {
    Ok((global_avg_pool(x)? + global_max_pool(x)?)?)
}

/// Steps (a)–(e): upsample, describe, concatenate, gate, multiply.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    conv: Conv2d,
}

impl AttentionGate {
    pub fn new(scope: &Scope, fine_c: usize, coarse_c: usize) -> Result<Self> {
        Ok(Self {
            conv: conv2d(&scope.pp("conv"), 2 * fine_c + coarse_c, fine_c, 1, 1, 0, true)?,
        })
    }

    /// Gate map `ReLU(W · [fine, up, descriptor] + b)`, shape of `fine`.
    pub fn gate(&self, fine: &Tensor, up: &Tensor) -> Result<Tensor> {
        let desc = pooled_descriptor(fine)?.broadcast_as(fine.shape())?;
        let stacked = Tensor::cat(&[fine, up, &desc], 1)?;
        Ok(self.conv.forward(&stacked)?.relu()?)
    }

    pub fn forward(&self, fine: &Tensor, up: &Tensor) -> Result<Tensor> {
        Ok((self.gate(fine, up)? * fine)?)
    }
}

#[derive(Debug, Clone)]
pub struct UpAttention {
    gate: Option<AttentionGate>,
    reduce: ConvBn2d,
    refine: ConvBn2d,
}

impl UpAttention {
    /// `gated = false` drops steps (b)–(e) for the ablation decoder.
    pub fn new(scope: &Scope, fine_c: usize, coarse_c: usize, out_c: usize, gated: bool) -> Result<Self> {
        Ok(Self {
            gate: if gated {
                Some(AttentionGate::new(&scope.pp("gate"), fine_c, coarse_c)?)
            } else {
                None
            },
            reduce: ConvBn2d::new(&scope.pp("reduce"), fine_c + coarse_c, out_c, 1)?,
            refine: ConvBn2d::new(&scope.pp("refine"), out_c, out_c, 3)?,
        })
    }

    pub fn gate(&self) -> Option<&AttentionGate> {
        self.gate.as_ref()
    }

    pub fn forward_t(&self, fine: &Tensor, coarse: &Tensor, train: bool) -> Result<Tensor> {
        let (bf, _, h, w) = fine.dims4()?;
        let (bc, _, hc, wc) = coarse.dims4()?;
        if bf != bc || hc * 2 != h || wc * 2 != w {
            return Err(Error::shape(format!(
                "UpAttention needs coarse at half the fine size: fine {:?}, coarse {:?}",
                fine.dims(),
                coarse.dims()
            )));
        }
        let up = resize_bilinear(coarse, h, w)?;
        let refined = match &self.gate {
            Some(g) => g.forward(fine, &up)?,
            None => fine.clone(),
        };
        let merged = Tensor::cat(&[&refined, &up], 1)?;
        let y = self.reduce.forward_t(&merged, train)?;
        self.refine.forward_t(&y, train)
    }
}

/// `UpAttention(t1, UpAttention(t2, t3))` followed by a 1×1 sigmoid head.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub inner: UpAttention,
    pub outer: UpAttention,
    head: Conv2d,
}

impl Cascade {
    pub fn new(scope: &Scope, base_channels: usize, gated: bool) -> Result<Self> {
        let c = base_channels;
        Ok(Self {
            inner: UpAttention::new(&scope.pp("inner"), 6 * c, 12 * c, 6 * c, gated)?,
            outer: UpAttention::new(&scope.pp("outer"), 3 * c, 6 * c, 3 * c, gated)?,
            head: conv2d(&scope.pp("head"), 3 * c, 1, 1, 1, 0, true)?,
        })
    }

    pub fn logits_t(&self, feats: &MsffOutput, train: bool) -> Result<Tensor> {
        let [t1, t2, t3] = &feats.tensors;
        let inner = self.inner.forward_t(t2, t3, train)?;
        let outer = self.outer.forward_t(t1, &inner, train)?;
        Ok(self.head.forward(&outer)?)
    }

    /// Mask probabilities `(B, 1, H, W)`.
    pub fn forward_t(&self, feats: &MsffOutput, train: bool) -> Result<Tensor> {
        sigmoid(&self.logits_t(feats, train)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn descriptor_of_constant_map_is_twice_the_constant() {
        let x = Tensor::full(0.75f32, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let d = to_f64_vec(&pooled_descriptor(&x).unwrap()).unwrap();
        assert_eq!(d, vec![1.5; 6]);
    }

    #[test]
    fn up_attention_shape() {
        let store = ParamStore::new(1, DType::F32);
        let block = UpAttention::new(&store.root(), 48, 96, 48, true).unwrap();
        let fine = Tensor::randn(0f32, 1.0, (2, 48, 8, 8), &Device::Cpu).unwrap();
        let coarse = Tensor::randn(0f32, 1.0, (2, 96, 4, 4), &Device::Cpu).unwrap();
        let y = block.forward_t(&fine, &coarse, true).unwrap();
        assert_eq!(y.dims(), &[2, 48, 8, 8]);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let store = ParamStore::new(1, DType::F32);
        let block = UpAttention::new(&store.root(), 4, 8, 4, true).unwrap();
        let fine = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let coarse = Tensor::zeros((1, 8, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(block.forward_t(&fine, &coarse, false), Err(Error::Shape(_))));
    }
}
