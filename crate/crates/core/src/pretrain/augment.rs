//! Photometric augmentation for Siamese pretraining.
//!
//! Captions may carry position words ("lesion in the left lung"), so no
//! geometric transform is offered: flips and crops are rejected outright
//! when a policy is parsed.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::params::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    /// Multiply by a factor drawn from `[1 - m, 1 + m]`.
    BrightnessJitter,
    /// Scale deviations from the per-channel mean by a factor in `[1 - m, 1 + m]`.
    ContrastJitter,
    /// Additive zero-mean noise with standard deviation `m`.
    GaussianNoise,
    /// Separable blur with sigma drawn from `[0.1, max(m, 0.1)]`.
    GaussianBlur,
    /// Blend toward luminance with weight drawn from `[0, m]`.
    GrayscaleMix,
}

const GEOMETRIC: &[&str] = &[
    "flip",
    "hflip",
    "vflip",
    "horizontal-flip",
    "vertical-flip",
    "random-flip",
    "crop",
    "random-crop",
    "center-crop",
    "resized-crop",
    "random-resized-crop",
];

impl AugmentKind {
    pub fn parse(name: &str) -> Result<Self> {
        let norm = name.trim().to_ascii_lowercase().replace('_', "-");
        if GEOMETRIC.contains(&norm.as_str()) || norm.contains("flip") || norm.contains("crop") {
            return Err(Error::config(format!(
                "augmentation `{name}` is geometric; flips and crops would contradict position words in captions"
            )));
        }
        match norm.as_str() {
            "brightness-jitter" | "brightness" => Ok(Self::BrightnessJitter),
            "contrast-jitter" | "contrast" => Ok(Self::ContrastJitter),
            "gaussian-noise" | "noise" => Ok(Self::GaussianNoise),
            "gaussian-blur" | "blur" => Ok(Self::GaussianBlur),
            "grayscale-mix" | "grayscale" => Ok(Self::GrayscaleMix),
            _ => Err(Error::config(format!("unknown augmentation `{name}`"))),
        }
    }
}

/// Config-file form of one op; `kind` is validated by [`AugmentationPolicy::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOpSpec {
    pub kind: String,
    pub prob: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOp {
    pub kind: AugmentKind,
    pub prob: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub seed: u64,
    pub ops: Vec<AugmentOpSpec>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let op = |kind: &str, prob, magnitude| AugmentOpSpec {
            kind: kind.into(),
            prob,
            magnitude,
        };
        Self {
            seed: 0,
            ops: vec![
                op("brightness-jitter", 0.8, 0.4),
                op("contrast-jitter", 0.8, 0.4),
                op("grayscale-mix", 0.2, 1.0),
                op("gaussian-blur", 0.5, 1.5),
                op("gaussian-noise", 0.5, 0.03),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    ops: Vec<AugmentOp>,
    seed: u64,
}

impl AugmentationPolicy {
    pub fn new(ops: Vec<AugmentOp>, seed: u64) -> Result<Self> {
        for op in &ops {
            if !(0.0..=1.0).contains(&op.prob) {
                return Err(Error::config(format!("{:?}: probability {} outside [0, 1]", op.kind, op.prob)));
            }
            if !op.magnitude.is_finite() || op.magnitude < 0.0 {
                return Err(Error::config(format!("{:?}: magnitude must be finite and >= 0", op.kind)));
            }
            if matches!(op.kind, AugmentKind::BrightnessJitter | AugmentKind::ContrastJitter | AugmentKind::GrayscaleMix)
                && op.magnitude > 1.0
            {
                return Err(Error::config(format!("{:?}: magnitude must be <= 1", op.kind)));
            }
        }
        Ok(Self { ops, seed })
    }

    pub fn from_config(cfg: &AugmentConfig) -> Result<Self> {
        let ops = cfg
            .ops
            .iter()
            .map(|s| {
                Ok(AugmentOp {
                    kind: AugmentKind::parse(&s.kind)?,
                    prob: s.prob,
                    magnitude: s.magnitude,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ops, cfg.seed)
    }

    /// A policy that never fires.
    pub fn identity(seed: u64) -> Self {
        Self { ops: Vec::new(), seed }
    }

    pub fn ops(&self) -> &[AugmentOp] {
        &self.ops
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Augments one `3 × H × W` image with the RNG stream `(seed, stream, view)`.
    pub fn apply(&self, image: &[f32], h: usize, w: usize, stream: u64, view: u8) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{stream}/{view}")));
        let mut out = image.to_vec();
        let mut touched = false;
        for op in &self.ops {
            if op.prob == 0.0 || rng.random::<f64>() >= op.prob {
                continue;
            }
            touched = true;
            apply_op(&mut out, h, w, op, &mut rng);
        }
        if touched {
            out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        out
    }
}

fn apply_op(img: &mut [f32], h: usize, w: usize, op: &AugmentOp, rng: &mut ChaCha8Rng) {
    let m = op.magnitude;
    let plane = h * w;
    match op.kind {
        AugmentKind::BrightnessJitter => {
            let f = rng.random_range(1.0 - m..=1.0 + m) as f32;
            img.iter_mut().for_each(|v| *v *= f);
        }
        AugmentKind::ContrastJitter => {
            let f = rng.random_range(1.0 - m..=1.0 + m) as f32;
            for ch in img.chunks_mut(plane) {
                let mean = ch.iter().sum::<f32>() / plane as f32;
                ch.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
            }
        }
        AugmentKind::GaussianNoise => {
            if m > 0.0 {
                let normal = Normal::new(0.0, m).expect("finite positive std");
                img.iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
            }
        }
        AugmentKind::GaussianBlur => {
            let sigma = rng.random_range(0.1..=m.max(0.1));
            let kernel = gaussian_kernel(sigma);
            for ch in img.chunks_mut(plane) {
                blur_plane(ch, h, w, &kernel);
            }
        }
        AugmentKind::GrayscaleMix => {
            let a = rng.random_range(0.0..=m) as f32;
            if img.len() == 3 * plane {
                for i in 0..plane {
                    let y = 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
                    for c in 0..3 {
                        let v = &mut img[c * plane + i];
                        *v = (1.0 - a) * *v + a * y;
                    }
                }
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (2.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable convolution with edge clamping.
fn blur_plane(p: &mut [f32], h: usize, w: usize, k: &[f32]) {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; p.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * p[y * w + xx]
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            p[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| {
                    let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
}

/// Two independently augmented views of one image.
pub fn augment_pair(
    image: &[f32],
    h: usize,
    w: usize,
    policy: &AugmentationPolicy,
    stream: u64,
) -> (Vec<f32>, Vec<f32>) {
    (policy.apply(image, h, w, stream, 1), policy.apply(image, h, w, stream, 2))
}

/// Batched [`augment_pair`] over `(B, 3, H, W)`; sample `b` uses stream
/// `streams[b]`.
pub fn augment_batch(images: &Tensor, policy: &AugmentationPolicy, streams: &[u64], exec: Exec) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = images.dims4()?;
    if streams.len() != b {
        return Err(Error::shape(format!("{} streams for batch of {b}", streams.len())));
    }
    let dtype = images.dtype();
    let flat: Vec<f32> = images.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let per = c * h * w;
    let idx: Vec<usize> = (0..b).collect();
    let pairs = exec.map(&idx, |_, &i| augment_pair(&flat[i * per..(i + 1) * per], h, w, policy, streams[i]));
    let (mut v1, mut v2) = (Vec::with_capacity(b * per), Vec::with_capacity(b * per));
    for (a, z) in pairs {
        v1.extend(a);
        v2.extend(z);
    }
    let mk = |v: Vec<f32>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, c, h, w), &Device::Cpu)?.to_dtype(dtype)?) };
    Ok((mk(v1)?, mk(v2)?))
}
