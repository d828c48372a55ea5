//! Stage 1: Siamese image–caption pretraining of the encoder.
//!
//! Both augmented views share the caption. A projector maps the pooled
//! feature pyramid to `Y`, a predictor maps `Y` to `P`, and the loss is
//! `D(P1, sg(Y2)) + D(P2, sg(Y1))` with `D` the negative cosine.

pub mod augment;

use std::sync::Arc;

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Ablation, Encoder, ModelConfig};
use crate::nn::{global_avg_pool, linear, to_f64_vec, BatchNorm};
use crate::optim::{grad_norm, Sgd};
use crate::params::Scope;
use crate::ppe::FeaturePyramid;
use crate::text_encoder::{Caption, Embedder};

pub use augment::{augment_batch, augment_pair, AugmentConfig, AugmentKind, AugmentOp, AugmentationPolicy};

/// Norm floor in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// GAP of each level, concatenated to `(B, 7C)`.
pub fn pooled_concat(pyr: &FeaturePyramid) -> Result<Tensor> {
    let pooled = pyr
        .levels
        .iter()
        .map(|l| Ok(global_avg_pool(l)?.flatten_from(1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&pooled, 1)?)
}

/// `7C → Z → BN → ReLU → Z`.
#[derive(Debug, Clone)]
pub struct Projector {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Projector {
    pub fn new(scope: &Scope, base_channels: usize, z: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(&scope.pp("fc1"), 7 * base_channels, z, false)?,
            bn: BatchNorm::new(&scope.pp("bn"), z)?,
            fc2: linear(&scope.pp("fc2"), z, z, true)?,
        })
    }

    pub fn forward_t(&self, pyr: &FeaturePyramid, train: bool) -> Result<Tensor> {
        let h = self.fc1.forward(&pooled_concat(pyr)?)?;
        let h = self.bn.forward_t(&h, train)?.relu()?;
        Ok(self.fc2.forward(&h)?)
    }
}

/// Bottleneck `Z → Z/4 → BN → ReLU → Z`.
#[derive(Debug, Clone)]
pub struct Predictor {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Predictor {
    pub fn new(scope: &Scope, z: usize) -> Result<Self> {
        if z < 4 {
            return Err(Error::config("projection width must be at least 4"));
        }
        Ok(Self {
            fc1: linear(&scope.pp("fc1"), z, z / 4, false)?,
            bn: BatchNorm::new(&scope.pp("bn"), z / 4)?,
            fc2: linear(&scope.pp("fc2"), z / 4, z, true)?,
        })
    }

    pub fn forward_t(&self, y: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn.forward_t(&self.fc1.forward(y)?, train)?.relu()?;
        Ok(self.fc2.forward(&h)?)
    }
}

/// `-mean_b cos(p_b, z_b)`; `z` is detached.
pub fn neg_cosine(p: &Tensor, z: &Tensor) -> Result<Tensor> {
    let z = z.detach();
    let dot = (p * &z)?.sum(D::Minus1)?;
    let np = p.sqr()?.sum(D::Minus1)?.sqrt()?.clamp(COSINE_EPS, f64::INFINITY)?;
    let nz = z.sqr()?.sum(D::Minus1)?.sqrt()?.clamp(COSINE_EPS, f64::INFINITY)?;
    Ok((dot / (np * nz)?)?.mean_all()?.neg()?)
}

/// Mean over dimensions of the per-dimension standard deviation of the
/// row-normalized representations. Collapse drives it to zero; healthy
/// training stays near `1/sqrt(Z)`.
pub fn representation_std(y: &Tensor) -> Result<f64> {
    let (b, z) = y.dims2()?;
    let v = to_f64_vec(y)?;
    let mut rows = Vec::with_capacity(b);
    for r in v.chunks(z) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
        rows.push(r.iter().map(|x| x / n).collect::<Vec<_>>());
    }
    let mut total = 0.0;
    for d in 0..z {
        let mean = rows.iter().map(|r| r[d]).sum::<f64>() / b as f64;
        let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / b as f64;
        total += var.sqrt();
    }
    Ok(total / z as f64)
}

#[derive(Debug, Clone)]
pub struct SiameseNet {
    pub encoder: Encoder,
    pub projector: Projector,
    pub predictor: Predictor,
}

/// Intermediate values of one Siamese forward pass.
#[derive(Debug, Clone)]
pub struct SiameseOutput {
    pub loss: Tensor,
    pub y1: Tensor,
    pub y2: Tensor,
    pub p1: Tensor,
    pub p2: Tensor,
}

impl SiameseNet {
    pub fn new(root: &Scope, cfg: &ModelConfig, embedder: Arc<dyn Embedder>, ablation: &Ablation) -> Result<Self> {
        let encoder = Encoder::new(root, cfg, embedder, ablation)?;
        let head = root.pp("pretrain");
        Ok(Self {
            encoder,
            projector: Projector::new(&head.pp("projector"), cfg.ppe.base_channels, cfg.projection_dim)?,
            predictor: Predictor::new(&head.pp("predictor"), cfg.projection_dim)?,
        })
    }

    /// `Y = projector(F(x, text))`.
    pub fn project(&self, images: &Tensor, text1: &Tensor, train: bool) -> Result<Tensor> {
        let pyr = self.encoder.ppe.forward_t(images, text1, train)?;
        self.projector.forward_t(&pyr, train)
    }

    /// Symmetric loss over two views that share `captions`.
    pub fn forward_t(
        &self,
        view1: &Tensor,
        view2: &Tensor,
        captions: &[Caption],
        train: bool,
        exec: Exec,
    ) -> Result<SiameseOutput> {
        let text = self.encoder.text.encode(captions, view1.dtype(), exec)?;
        let y1 = self.project(view1, text.level(1), train)?;
        let y2 = self.project(view2, text.level(1), train)?;
        let p1 = self.predictor.forward_t(&y1, train)?;
        let p2 = self.predictor.forward_t(&y2, train)?;
        let loss = (neg_cosine(&p1, &y2)? + neg_cosine(&p2, &y1)?)?;
        Ok(SiameseOutput { loss, y1, y2, p1, p2 })
    }
}

#[derive(Debug, Clone)]
pub struct Stage1StepOutput {
    pub loss: f64,
    /// Detached projections of the first view.
    pub y1: Tensor,
}

/// Augment, forward, backpropagate and apply one SGD update.
///
/// `streams[b]` keys the augmentation RNG of sample `b`.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step(
    net: &SiameseNet,
    opt: &mut Sgd,
    images: &Tensor,
    captions: &[Caption],
    policy: &AugmentationPolicy,
    streams: &[u64],
    lr: f64,
    step: usize,
    exec: Exec,
) -> Result<Stage1StepOutput> {
    let (v1, v2) = augment_batch(images, policy, streams, exec)?;
    let out = net.forward_t(&v1, &v2, captions, true, exec)?;
    let loss = out.loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    let grads = out.loss.backward()?;
    if !loss.is_finite() {
        let norm = |t: &Tensor| -> String {
            t.sqr()
                .and_then(|s| s.sum_all())
                .and_then(|s| s.to_dtype(candle_core::DType::F64))
                .and_then(|s| s.to_scalar::<f64>())
                .map(|v| format!("{:.4e}", v.sqrt()))
                .unwrap_or_else(|e| format!("<{e}>"))
        };
        return Err(Error::NonFinite {
            step,
            diagnostic: format!(
                "loss={loss} |y1|={} |y2|={} |p1|={} |p2|={} |grad|={:.4e}",
                norm(&out.y1),
                norm(&out.y2),
                norm(&out.p1),
                norm(&out.p2),
                grad_norm(opt.params(), &grads)?
            ),
        });
    }
    opt.step(&grads, lr)?;
    Ok(Stage1StepOutput {
        loss,
        y1: out.y1.detach(),
    })
}
