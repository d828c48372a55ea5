//! Weighted BCE and weighted Dice segmentation losses.
//!
//! The BCE term is kept as a per-pixel map and reduced separately over the
//! foreground and background pixels of each sample, so class imbalance does
//! not swamp the foreground. The Dice term is evaluated exactly as
//! `(w1·w2·Σpy + s) / (w1·Σp² + w2·Σy² + s)` per sample; with the default
//! weights its optimum is 0.25, so a perfect prediction leaves a Dice loss
//! of 0.75 and a total of 0.375. `canonical_dice` switches to the usual
//! `(2Σpy + s) / (Σp² + Σy² + s)` form.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::to_f64_vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w1: f64,
    pub w2: f64,
    pub smooth: f64,
    pub prob_clamp_eps: f64,
    pub canonical_dice: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w1: 0.5,
            w2: 0.5,
            smooth: 1e-12,
            prob_clamp_eps: 1e-7,
            canonical_dice: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.smooth <= 0.0 {
            return Err(Error::config("smooth must be positive"));
        }
        if !(0.0..0.5).contains(&self.prob_clamp_eps) {
            return Err(Error::config("prob_clamp_eps must be in [0, 0.5)"));
        }
        Ok(())
    }
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() || pred.rank() < 2 {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} must share a batched shape",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

/// Per-sample sums over every axis but the batch axis, shape `(B,)`.
fn per_sample_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(1)?)
}

/// Per-pixel `−[y·ln p + (1−y)·ln(1−p)]` with `p` clamped to `[eps, 1−eps]`.
pub fn bce_map(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    check_pair(pred, target)?;
    let p = pred.clamp(eps, 1.0 - eps)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_y = target.affine(-1.0, 1.0)?;
    let ll = ((target * p.log()?)? + (one_minus_y * one_minus_p.log()?)?)?;
    Ok(ll.neg()?)
}

/// `w1·Σ(pos·bce)/pos_sum + w2·Σ(neg·bce)/neg_sum` per sample, averaged
/// over the batch. A class absent from a sample contributes nothing.
pub fn wbce(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let bce = bce_map(pred, target, cfg.prob_clamp_eps)?;
    let b = pred.dim(0)?;
    let pos = target.detach();
    let neg = pos.affine(-1.0, 1.0)?;
    let pos_sum = to_f64_vec(&per_sample_sum(&pos)?)?;
    let neg_sum = to_f64_vec(&per_sample_sum(&neg)?)?;
    let scale = |sums: &[f64], w: f64| -> Result<Tensor> {
        let v: Vec<f64> = sums.iter().map(|&s| if s > 0.0 { w / s } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, b, pred.device())?.to_dtype(pred.dtype())?)
    };
    let pos_term = (per_sample_sum(&(&pos * &bce)?)? * scale(&pos_sum, cfg.w1)?)?;
    let neg_term = (per_sample_sum(&(&neg * &bce)?)? * scale(&neg_sum, cfg.w2)?)?;
    Ok((pos_term + neg_term)?.mean_all()?)
}

/// Per-sample smoothed Dice ratio, shape `(B,)`.
pub fn dice_ratio(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_pair(pred, target)?;
    let y = target.detach();
    let inter = per_sample_sum(&(pred * &y)?)?;
    let p2 = per_sample_sum(&pred.sqr()?)?;
    let y2 = per_sample_sum(&y.sqr()?)?;
    let s = cfg.smooth;
    let (num, den) = if cfg.canonical_dice {
        ((inter * 2.0)? + s, (p2 + y2)? + s)
    } else {
        (
            (inter * (cfg.w1 * cfg.w2))? + s,
            ((p2 * cfg.w1)? + (y2 * cfg.w2)?)? + s,
        )
    };
    Ok((num? / den?)?)
}

pub fn wdice(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let ratio = dice_ratio(pred, target, cfg)?;
    Ok(ratio.mean_all()?.affine(-1.0, 1.0)?)
}

/// `w1·WBCE + w2·WDice`.
pub fn total_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let bce = wbce(pred, target, cfg)?;
    let dice = wdice(pred, target, cfg)?;
    Ok(((bce * cfg.w1)? + (dice * cfg.w2)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
