//! Stepwise trainers for both stages, with checkpoint/resume.
//!
//! Sample order, augmentation streams and dropout masks are pure functions
//! of the run seed and the global step, so a resumed run continues exactly
//! where the checkpoint left off.

use std::sync::Arc;

use candle_core::{DType, Tensor};

use crate::checkpoint::{restore, CheckpointBundle, CheckpointMeta, RestoreReport, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::data::{batch_schedule, collate, BatchMode, Sample};
use crate::error::{Error, Result};
use crate::losses::{scalar, total_loss};
use crate::metrics::{evaluate_batch, BinaryMask, MetricRow};
use crate::model::{is_encoder_param, Segmenter};
use crate::nn::to_f64_vec;
use crate::optim::{grad_norm, Sgd};
use crate::params::{derive_seed, lock_rng, ParamStore};
use crate::pretrain::{representation_std, stage1_step, AugmentationPolicy, SiameseNet};
use crate::text_encoder::Embedder;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based count of completed optimizer steps.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Position of global step `step` in the epoch/batch schedule.
struct Cursor {
    epoch: usize,
    batch: Vec<usize>,
}

fn cursor(cfg: &RunConfig, n: usize, batch_size: usize, step: usize) -> Result<Cursor> {
    let per_epoch = n / batch_size;
    if per_epoch == 0 {
        return Err(Error::Data(format!("{n} samples cannot fill one batch of {batch_size}")));
    }
    let epoch = step / per_epoch;
    let schedule = batch_schedule(n, batch_size, cfg.seed, epoch, BatchMode::Train)?;
    Ok(Cursor {
        epoch,
        batch: schedule[step % per_epoch].clone(),
    })
}

fn rng_state(store: &ParamStore) -> Result<serde_json::Value> {
    serde_json::to_value(&*lock_rng(&store.rng())).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn set_rng_state(store: &ParamStore, v: &serde_json::Value) -> Result<()> {
    let rng = serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("rng state: {e}")))?;
    *lock_rng(&store.rng()) = rng;
    Ok(())
}

fn bundle(stage: u8, step: usize, epoch: usize, store: &ParamStore, opt: &Sgd, cfg: &RunConfig) -> Result<CheckpointBundle> {
    Ok(CheckpointBundle {
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            stage,
            step,
            epoch,
            rng_state: rng_state(store)?,
            config: serde_json::to_value(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
        },
        params: store.snapshot()?,
        momentum: opt.state().clone(),
    })
}

fn expect_stage(b: &CheckpointBundle, stage: u8) -> Result<()> {
    if b.meta.stage != stage {
        return Err(Error::Checkpoint(format!(
            "expected a stage-{stage} checkpoint, found stage {}",
            b.meta.stage
        )));
    }
    Ok(())
}

pub struct Stage1Trainer {
    cfg: RunConfig,
    store: ParamStore,
    net: SiameseNet,
    opt: Sgd,
    policy: AugmentationPolicy,
    samples: Vec<Sample>,
    step: usize,
    total_steps: usize,
    last_y: Option<Tensor>,
}

impl Stage1Trainer {
    pub fn new(cfg: RunConfig, samples: Vec<Sample>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, cfg.precision.dtype());
        let net = SiameseNet::new(&store.root(), &cfg.model, embedder, &cfg.ablation)?;
        let opt = Sgd::new(store.trainable(|_| true), &cfg.stage1.optim)?;
        let total_steps = cfg.stage1.total_steps(samples.len());
        if total_steps == 0 {
            return Err(Error::Data(format!(
                "{} samples with batch size {} yield no training steps",
                samples.len(),
                cfg.stage1.batch_size
            )));
        }
        Ok(Self {
            policy: cfg.policy()?,
            cfg,
            store,
            net,
            opt,
            samples,
            step: 0,
            total_steps,
            last_y: None,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn net(&self) -> &SiameseNet {
        &self.net
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Representation spread of the most recent batch.
    pub fn last_representation_std(&self) -> Result<Option<f64>> {
        self.last_y.as_ref().map(representation_std).transpose()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let s = &self.cfg.stage1;
        let cur = cursor(&self.cfg, self.samples.len(), s.batch_size, self.step)?;
        let lr = s.optim.lr_at(s.batch_size, self.step, self.total_steps);
        let batch = collate(&self.samples, &cur.batch, self.store.dtype(), self.cfg.data.normalize.as_ref())?;
        let streams: Vec<u64> = cur
            .batch
            .iter()
            .map(|i| derive_seed(self.cfg.seed, &format!("augment/{}/{i}", cur.epoch)))
            .collect();
        let out = stage1_step(
            &self.net,
            &mut self.opt,
            &batch.images,
            &batch.captions,
            &self.policy,
            &streams,
            lr,
            self.step,
            self.cfg.exec(),
        )?;
        self.last_y = Some(out.y1);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: cur.epoch,
            lr,
            loss: out.loss,
        })
    }

    pub fn checkpoint(&self) -> Result<CheckpointBundle> {
        let per_epoch = self.samples.len() / self.cfg.stage1.batch_size;
        bundle(1, self.step, self.step / per_epoch, &self.store, &self.opt, &self.cfg)
    }

    pub fn resume(&mut self, b: &CheckpointBundle) -> Result<RestoreReport> {
        expect_stage(b, 1)?;
        let report = restore(&self.store, &b.params, |_| true)?;
        self.opt.load_state(b.momentum.clone())?;
        set_rng_state(&self.store, &b.meta.rng_state)?;
        self.step = b.meta.step;
        Ok(report)
    }
}

/// How stage-2 parameters are initialized.
#[derive(Debug, Clone, Copy)]
pub enum Stage2Init<'a> {
    FromScratch,
    /// Inherit `ppe.*` and `text_encoder.*` from a stage-1 bundle.
    Inherit(&'a CheckpointBundle),
}

pub struct Stage2Trainer {
    cfg: RunConfig,
    store: ParamStore,
    model: Segmenter,
    opt: Sgd,
    samples: Vec<Sample>,
    step: usize,
    total_steps: usize,
    report: Option<RestoreReport>,
}

impl Stage2Trainer {
    pub fn new(cfg: RunConfig, samples: Vec<Sample>, embedder: Arc<dyn Embedder>, init: Stage2Init<'_>) -> Result<Self> {
        cfg.validate()?;
        if let Some(i) = samples.iter().position(|s| s.mask.is_none()) {
            return Err(Error::Data(format!("sample {i} has no mask")));
        }
        let store = ParamStore::new(cfg.seed, cfg.precision.dtype());
        let model = Segmenter::new(&store.root(), &cfg.model, embedder, &cfg.ablation)?;
        let report = match init {
            Stage2Init::FromScratch => None,
            Stage2Init::Inherit(b) => {
                expect_stage(b, 1)?;
                Some(restore(&store, &b.params, is_encoder_param)?)
            }
        };
        let freeze = cfg.freeze_ppe;
        let opt = Sgd::new(
            store.trainable(|n| !(freeze && n.starts_with("ppe."))),
            &cfg.stage2.optim,
        )?;
        let total_steps = cfg.stage2.total_steps(samples.len());
        if total_steps == 0 {
            return Err(Error::Data(format!(
                "{} samples with batch size {} yield no training steps",
                samples.len(),
                cfg.stage2.batch_size
            )));
        }
        Ok(Self {
            cfg,
            store,
            model,
            opt,
            samples,
            step: 0,
            total_steps,
            report,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn model(&self) -> &Segmenter {
        &self.model
    }

    pub fn restore_report(&self) -> Option<&RestoreReport> {
        self.report.as_ref()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let s = &self.cfg.stage2;
        let cur = cursor(&self.cfg, self.samples.len(), s.batch_size, self.step)?;
        let lr = s.optim.lr_at(s.batch_size, self.step, self.total_steps);
        let batch = collate(&self.samples, &cur.batch, self.store.dtype(), self.cfg.data.normalize.as_ref())?;
        let masks = batch.masks.as_ref().ok_or_else(|| Error::Data("batch without masks".into()))?;
        let logits = self.model.logits_split(
            &batch.images,
            &batch.captions,
            !self.cfg.freeze_ppe,
            true,
            self.cfg.exec(),
        )?;
        let probs = crate::nn::sigmoid(&logits)?;
        let loss_t = total_loss(&probs, masks, &self.cfg.loss)?;
        let loss = scalar(&loss_t)?;
        let grads = loss_t.backward()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                diagnostic: format!(
                    "loss={loss} |grad|={:.4e} logits range={:?}",
                    grad_norm(self.opt.params(), &grads)?,
                    min_max(&logits)?
                ),
            });
        }
        self.opt.step(&grads, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: cur.epoch,
            lr,
            loss,
        })
    }

    pub fn checkpoint(&self) -> Result<CheckpointBundle> {
        let per_epoch = self.samples.len() / self.cfg.stage2.batch_size;
        bundle(2, self.step, self.step / per_epoch, &self.store, &self.opt, &self.cfg)
    }

    pub fn resume(&mut self, b: &CheckpointBundle) -> Result<RestoreReport> {
        expect_stage(b, 2)?;
        let report = restore(&self.store, &b.params, |_| true)?;
        self.opt.load_state(b.momentum.clone())?;
        set_rng_state(&self.store, &b.meta.rng_state)?;
        self.step = b.meta.step;
        Ok(report)
    }

    /// Eval-mode probabilities for every sample, in input order.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<Vec<f32>>> {
        predict_probabilities(
            &self.model,
            samples,
            self.cfg.stage2.batch_size,
            self.store.dtype(),
            &self.cfg,
        )
    }

    /// Per-sample metrics of the current model on `samples`.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<Vec<MetricRow>> {
        evaluate_samples(&self.model, samples, &self.cfg, self.store.dtype())
    }
}

fn min_max(t: &Tensor) -> Result<(f64, f64)> {
    let v = to_f64_vec(t)?;
    Ok(v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x))))
}

/// Runs the segmenter in eval mode over `samples` in batches.
pub fn predict_probabilities(
    model: &Segmenter,
    samples: &[Sample],
    batch_size: usize,
    dtype: DType,
    cfg: &RunConfig,
) -> Result<Vec<Vec<f32>>> {
    let schedule = batch_schedule(samples.len(), batch_size.max(1), cfg.seed, 0, BatchMode::Eval)?;
    let mut out = Vec::with_capacity(samples.len());
    for idx in schedule {
        let batch = collate(samples, &idx, dtype, cfg.data.normalize.as_ref())?;
        let probs = model.forward_t(&batch.images, &batch.captions, false, cfg.exec())?;
        let (b, _, h, w) = probs.dims4()?;
        let flat: Vec<f32> = probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        out.extend((0..b).map(|i| flat[i * h * w..(i + 1) * h * w].to_vec()));
    }
    Ok(out)
}

pub fn evaluate_samples(model: &Segmenter, samples: &[Sample], cfg: &RunConfig, dtype: DType) -> Result<Vec<MetricRow>> {
    let targets = samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.mask.clone().ok_or_else(|| Error::Data(format!("sample {i} has no mask"))))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict_probabilities(model, samples, cfg.stage2.batch_size, dtype, cfg)?;
    let preds = probs
        .iter()
        .zip(samples)
        .map(|(p, s)| BinaryMask::from_probabilities(s.height, s.width, p))
        .collect::<Result<Vec<_>>>()?;
    evaluate_batch(&preds, &targets, cfg.exec())
}

/// Rebuilds a segmenter from a stage-2 bundle.
///
/// Architecture comes from the bundle's own config snapshot so evaluation
/// cannot silently disagree with training.
pub fn load_segmenter(bundle: &CheckpointBundle, embedder: Arc<dyn Embedder>) -> Result<(RunConfig, ParamStore, Segmenter)> {
    expect_stage(bundle, 2)?;
    let cfg: RunConfig = serde_json::from_value(bundle.meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
    let store = ParamStore::new(cfg.seed, cfg.precision.dtype());
    let model = Segmenter::new(&store.root(), &cfg.model, embedder, &cfg.ablation)?;
    restore(&store, &bundle.params, |_| true)?;
    Ok((cfg, store, model))
}
