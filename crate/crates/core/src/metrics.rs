//! Confusion-matrix metrics for binary masks.
//!
//! Degenerate ratios follow one convention throughout: when both masks
//! agree that a class is absent, the ratio for that class is 1; when the
//! denominator is zero for any other reason, it is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Probabilities at or above this value count as foreground.
pub const THRESHOLD: f32 = 0.5;

/// Row-major `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask data has {} values for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_probabilities(height: usize, width: usize, probs: &[f32]) -> Result<Self> {
        let data = probs.iter().map(|&p| u8::from(p >= THRESHOLD)).collect();
        Self::new(height, width, data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Fraction with the "both absent → 1, otherwise 0" guard.
fn ratio(num: u64, den: u64, both_absent: bool) -> f64 {
    if den == 0 {
        if both_absent {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Contract("accuracy of an empty mask".into()));
        }
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }

    /// Mean of foreground and background IoU.
    pub fn miou(&self) -> f64 {
        let fg = ratio(self.tp, self.tp + self.fp + self.fn_, true);
        let bg = ratio(self.tn, self.tn + self.fn_ + self.fp, true);
        0.5 * (fg + bg)
    }

    /// `2|X∩Y| / (|X| + |Y|)`.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, true)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn precision_recall(&self) -> (f64, f64) {
        (self.precision(), self.recall())
    }
}

pub fn confusion(pred: &BinaryMask, target: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs target {}x{}",
            pred.height, pred.width, target.height, target.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    c.accuracy()
}

pub fn miou(c: &ConfusionCounts) -> f64 {
    c.miou()
}

pub fn dice_score(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    Ok(confusion(pred, target)?.dice())
}

pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    c.precision_recall()
}

/// One evaluation row, all values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub dice: f64,
    pub miou: f64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricRow {
    pub const COLUMNS: [&'static str; 5] = ["dice", "miou", "acc", "precision", "recall"];

    pub fn from_counts(c: &ConfusionCounts) -> Result<Self> {
        Ok(Self {
            dice: c.dice(),
            miou: c.miou(),
            acc: c.accuracy()?,
            precision: c.precision(),
            recall: c.recall(),
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.miou, self.acc, self.precision, self.recall]
    }
}

pub fn evaluate(pred: &BinaryMask, target: &BinaryMask) -> Result<MetricRow> {
    MetricRow::from_counts(&confusion(pred, target)?)
}

/// Per-image metrics over paired masks.
pub fn evaluate_batch(preds: &[BinaryMask], targets: &[BinaryMask], exec: Exec) -> Result<Vec<MetricRow>> {
    if preds.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    exec.try_map(preds, |i, p| evaluate(p, &targets[i]))
}

/// Unweighted mean over images.
pub fn macro_average(rows: &[MetricRow]) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(Error::Contract("macro average of zero images".into()));
    }
    let n = rows.len() as f64;
    let mut acc = [0.0; 5];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    Ok(MetricRow {
        dice: acc[0] / n,
        miou: acc[1] / n,
        acc: acc[2] / n,
        precision: acc[3] / n,
        recall: acc[4] / n,
    })
}
