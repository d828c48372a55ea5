//! Layer building blocks shared by every stage of the network.
//!
//! Normalization layers are written out in primitive tensor ops so that
//! they differentiate through candle's autograd; the fused kernels in
//! `candle_nn` have no backward pass.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Linear;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{lock_rng, Init, Scope, SharedRng};

pub fn linear(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = scope.weight("weight", (out_dim, in_dim), Init::Uniform(bound))?;
    let b = if bias {
        Some(scope.weight("bias", out_dim, Init::Uniform(bound))?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn conv2d(
    scope: &Scope,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Conv2d> {
    let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
    let weight = scope.weight("weight", (out_c, in_c, kernel, kernel), Init::Uniform(bound))?;
    let bias = if bias {
        Some(scope.weight("bias", out_c, Init::Uniform(bound))?)
    } else {
        None
    };
    Ok(Conv2d {
        weight,
        bias,
        stride,
        padding,
    })
}

/// 2-D convolution lowered to a matrix product over unfolded patches.
///
/// candle's native conv backward computes the weight gradient as a
/// convolution with an image-sized kernel, which dominates training time on
/// CPU; the unfolded form differentiates through plain matmuls instead.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// `(B, C·k·k, OH·OW)` patch matrix, channel-major then row-major kernel
    /// offsets, matching the flattened weight layout.
    fn unfold(&self, x: &Tensor) -> candle_core::Result<Option<(Tensor, usize, usize)>> {
        let (b, c, h, w) = x.dims4()?;
        let k = self.weight.dim(2)?;
        let (s, p) = (self.stride, self.padding);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        if k == 1 && s == 1 && p == 0 {
            return Ok(Some((x.reshape((b, c, h * w))?, oh, ow)));
        }
        if s == k && p == 0 && h % k == 0 && w % k == 0 {
            let cols = x
                .reshape((b, c, oh, k, ow, k))?
                .permute((0, 1, 3, 5, 2, 4))?
                .reshape((b, c * k * k, oh * ow))?;
            return Ok(Some((cols, oh, ow)));
        }
        if s == 1 {
            let cols = crate::unfold::im2col(x, k, p).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            return Ok(Some((cols, oh, ow)));
        }
        Ok(None)
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (o, c, k, _) = self.weight.dims4()?;
        let b = x.dim(0)?;
        let y = match self.unfold(x)? {
            Some((cols, oh, ow)) => {
                let wm = self.weight.reshape((o, c * k * k))?;
                wm.broadcast_matmul(&cols)?.reshape((b, o, oh, ow))?
            }
            None => x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?,
        };
        match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, o, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Pointwise 1-D convolution over `(B, C, L)`.
pub fn conv1d_pointwise(scope: &Scope, in_c: usize, out_c: usize, bias: bool) -> Result<Conv1d> {
    let bound = 1.0 / (in_c as f64).sqrt();
    let weight = scope.weight("weight", (out_c, in_c, 1), Init::Uniform(bound))?;
    let bias = if bias {
        Some(scope.weight("bias", out_c, Init::Uniform(bound))?)
    } else {
        None
    };
    Ok(Conv1d { weight, bias })
}

/// Kernel-size-1 convolution over `(B, C, L)`, computed as a matmul.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (o, c, _) = self.weight.dims3()?;
        let y = self.weight.reshape((o, c))?.broadcast_matmul(x)?;
        match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, o, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.weight("weight", dim, Init::Const(1.0))?,
            bias: scope.weight("bias", dim, Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xhat.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Batch normalization over axis 1 of a rank 2, 3 or 4 tensor.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates (momentum 0.1, unbiased variance); eval mode uses the
/// running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: candle_core::Var,
    running_var: candle_core::Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.weight("weight", channels, Init::Const(1.0))?,
            bias: scope.weight("bias", channels, Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", channels, Init::Const(0.0))?,
            running_var: scope.buffer("running_var", channels, Init::Const(1.0))?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rank = x.rank();
        if !(2..=4).contains(&rank) || x.dim(1)? != self.channels {
            return Err(Error::shape(format!(
                "batch norm over {} channels got input {:?}",
                self.channels,
                x.dims()
            )));
        }
        // View as (B, C, S) so every reduction runs over a contiguous last axis.
        let dims = x.dims().to_vec();
        let (b, c) = (dims[0], dims[1]);
        let spatial: usize = dims[2..].iter().product();
        let x3 = x.contiguous()?.reshape((b, c, spatial))?;
        let per_channel = |t: &Tensor| -> candle_core::Result<Tensor> { t.sum_keepdim(2)?.sum_keepdim(0) };

        let (mean, var) = if train {
            let n = b * spatial;
            let mean = (per_channel(&x3)? / n as f64)?;
            let var = (per_channel(&x3.broadcast_sub(&mean)?.sqr()?)? / n as f64)?;

            let m = self.momentum;
            let batch_mean = mean.detach().flatten_all()?;
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let batch_var = (var.detach().flatten_all()? * unbias)?;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (batch_var * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1))?,
            )
        };
        // y = x·scale + shift with per-channel scale = γ/σ, shift = β − μ·scale.
        let scale = self.weight.reshape((1, c, 1))?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let shift = (self.bias.reshape((1, c, 1))? - (mean * &scale)?)?;
        let y = x3.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        Ok(y.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: SharedRng,
}

impl Dropout {
    pub fn new(p: f64, rng: SharedRng) -> Self {
        Self { p, rng }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train || self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f32> = {
            let mut rng = lock_rng(&self.rng);
            (0..x.elem_count())
                .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep as f32 })
                .collect()
        };
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Conv2d (no bias) → BatchNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn2d {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn2d {
    pub fn new(scope: &Scope, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: conv2d(&scope.pp("conv"), in_c, out_c, kernel, 1, kernel / 2, false)?,
            bn: BatchNorm::new(&scope.pp("bn"), out_c)?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        Ok(self.bn.forward_t(&y, train)?.relu()?)
    }
}

/// Pointwise Conv1d (no bias) → BatchNorm → ReLU applied to token
/// sequences laid out as `(B, L, C)`.
#[derive(Debug, Clone)]
pub struct ConvBn1d {
    conv: Conv1d,
    bn: BatchNorm,
}

impl ConvBn1d {
    pub fn new(scope: &Scope, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: conv1d_pointwise(&scope.pp("conv"), in_c, out_c, false)?,
            bn: BatchNorm::new(&scope.pp("bn"), out_c)?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = x.transpose(1, 2)?.contiguous()?;
        let y = self.conv.forward(&x)?;
        let y = self.bn.forward_t(&y, train)?.relu()?;
        Ok(y.transpose(1, 2)?.contiguous()?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    drop: Dropout,
}

impl Mlp {
    pub fn new(scope: &Scope, dim: usize, hidden: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            fc1: linear(&scope.pp("fc1"), dim, hidden, true)?,
            fc2: linear(&scope.pp("fc2"), hidden, dim, true)?,
            drop: Dropout::new(dropout, scope.store().rng()),
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu_erf()?;
        let h = self.drop.forward_t(&h, train)?;
        let y = self.fc2.forward(&h)?;
        self.drop.forward_t(&y, train)
    }
}

/// Multi-head self-attention without positional terms.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    head_dim: usize,
    scale: f64,
}

impl MultiHeadAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "embedding width {dim} not divisible by {heads} heads"
            )));
        }
        let head_dim = dim / heads;
        Ok(Self {
            qkv: linear(&scope.pp("qkv"), dim, 3 * dim, false)?,
            proj: linear(&scope.pp("proj"), dim, dim, true)?,
            heads,
            head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        })
    }

    /// Returns the block output `(B, N, D)` and the attention weights
    /// `(B, heads, N, N)`.
    pub fn attend(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, self.head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * self.scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        Ok((self.proj.forward(&out)?, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.attend(x)?.0)
    }
}

/// Pre-norm transformer layer: `y = x + MSA(LN(x)); out = y + MLP(LN(y))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(scope: &Scope, dim: usize, heads: usize, mlp_ratio: f64, dropout: f64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Ok(Self {
            norm1: LayerNorm::new(&scope.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&scope.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            mlp: Mlp::new(&scope.pp("mlp"), dim, hidden, dropout)?,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let out = (&y + self.mlp.forward_t(&self.norm2.forward(&y)?, train)?)?;
        Ok(out)
    }

    /// Attention weights of this block's MSA for input `x`.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.attn.attend(&self.norm1.forward(x)?)?.1)
    }
}

/// Row-major `(out, in)` bilinear interpolation matrix using half-pixel
/// centers (the `align_corners = false` convention).
pub fn bilinear_weights(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of a `(B, C, H, W)` map, expressed as two
/// matrix products so that gradients flow back to the input.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let rows = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(dt)?;
    let cols = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?
        .to_dtype(dt)?
        .t()?
        .contiguous()?;
    let y = x.contiguous()?.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&y)?)
}

/// Per-channel spatial mean, `(B, C, H, W) → (B, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

/// Per-channel spatial max, `(B, C, H, W) → (B, C, 1, 1)`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    Ok(x.flatten_from(2)?.max_keepdim(D::Minus1)?.reshape((b, c, 1, 1))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Flattened host copy as `f64`, for assertions and host-side reductions.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        let a = to_f64_vec(a).unwrap();
        let b = to_f64_vec(b).unwrap();
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn unfolded_conv_matches_native_conv() {
        let dev = Device::Cpu;
        let store = ParamStore::new(4, DType::F64);
        let x = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        for (i, (k, s, p)) in [(1, 1, 0), (3, 1, 1), (4, 4, 0), (3, 2, 1)].into_iter().enumerate() {
            let conv = conv2d(&store.root().pp(i), 3, 5, k, s, p, true).unwrap();
            let ours = conv.forward(&x).unwrap();
            let native = x
                .conv2d(conv.weight(), p, s, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.as_ref().unwrap().reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), native.dims());
            assert!(max_abs_diff(&ours, &native) < 1e-12, "k={k} s={s} p={p}");
        }
        let c1 = conv1d_pointwise(&store.root().pp("c1"), 3, 4, true).unwrap();
        let seq = Tensor::randn(0f64, 1.0, (2, 3, 6), &dev).unwrap();
        let native = seq
            .conv1d(&c1.weight, 0, 1, 1, 1)
            .unwrap()
            .broadcast_add(&c1.bias.as_ref().unwrap().reshape((1, 4, 1)).unwrap())
            .unwrap();
        assert!(max_abs_diff(&c1.forward(&seq).unwrap(), &native) < 1e-12);
    }

    #[test]
    fn bilinear_matches_candle_forward_kernel() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 7, 5), &dev).unwrap();
        for (oh, ow) in [(14, 10), (28, 20), (9, 11)] {
            let ours = resize_bilinear(&x, oh, ow).unwrap();
            let reference = x.upsample_bilinear2d(oh, ow, false).unwrap();
            let diff = (ours - reference)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff < 1e-5, "({oh},{ow}) max diff {diff}");
        }
    }

    #[test]
    fn bilinear_rows_are_convex_combinations() {
        for (o, i) in [(4, 2), (56, 14), (3, 7)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(m[r * i..(r + 1) * i].iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let store = ParamStore::new(0, DType::F64);
        let bn = BatchNorm::new(&store.root().pp("bn"), 2).unwrap();
        let x = Tensor::new(&[[[1.0f64, 3.0]], [[5.0, 7.0]]], &Device::Cpu)
            .unwrap()
            .permute((0, 2, 1))
            .unwrap(); // (2, 2, 1)
        let y = bn.forward_t(&x, true).unwrap();
        let per_channel = y.sum_keepdim(vec![0usize, 2]).unwrap();
        for v in to_f64_vec(&per_channel).unwrap() {
            assert!(v.abs() < 1e-9);
        }
        // channel 0 sees {1, 5}: mean 3, unbiased var 8
        let rm = to_f64_vec(store.get("bn.running_mean").unwrap().var.as_tensor()).unwrap();
        let rv = to_f64_vec(store.get("bn.running_var").unwrap().var.as_tensor()).unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.8)).abs() < 1e-12);
    }

    #[test]
    fn global_pools_on_constant_map() {
        let x = Tensor::full(2.5f32, (1, 3, 4, 6), &Device::Cpu).unwrap();
        let avg = to_f64_vec(&global_avg_pool(&x).unwrap()).unwrap();
        let max = to_f64_vec(&global_max_pool(&x).unwrap()).unwrap();
        assert_eq!(avg, vec![2.5; 3]);
        assert_eq!(max, vec![2.5; 3]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::new(0, DType::F32);
        let d = Dropout::new(0.5, store.rng());
        let x = Tensor::ones((4, 4), DType::F32, &Device::Cpu).unwrap();
        let y = d.forward_t(&x, false).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), vec![1.0; 16]);
    }
}
