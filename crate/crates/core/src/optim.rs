//! SGD with momentum and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply `lr` by `batch_size / 256`.
    pub batch_scaling: bool,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl OptimConfig {
    pub fn stage1() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_scaling: true,
            schedule: Schedule::Cosine,
        }
    }

    pub fn stage2() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_scaling: false,
            schedule: Schedule::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("optimizer lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        Ok(())
    }

    pub fn base_lr(&self, batch_size: usize) -> f64 {
        if self.batch_scaling {
            self.lr * batch_size as f64 / 256.0
        } else {
            self.lr
        }
    }

    /// Learning rate at `step` of `total_steps` (0-based).
    pub fn lr_at(&self, batch_size: usize, step: usize, total_steps: usize) -> f64 {
        let base = self.base_lr(batch_size);
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug)]
pub struct Sgd {
    params: Vec<(String, Var)>,
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(params: Vec<(String, Var)>, cfg: &OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            buffers: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor();
            let g = if self.weight_decay > 0.0 {
                (g + (w * self.weight_decay)?)?
            } else {
                g.clone()
            };
            let buf = match self.buffers.get(name) {
                Some(b) if self.momentum > 0.0 => ((b * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(w - (&buf * lr)?)?)?;
            if self.momentum > 0.0 {
                self.buffers.insert(name.clone(), buf.detach());
            }
        }
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn load_state(&mut self, state: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in &state {
            let Some((_, var)) = self.params.iter().find(|(n, _)| n == name) else {
                return Err(Error::Checkpoint(format!("momentum buffer for unknown parameter `{name}`")));
            };
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("momentum buffer `{name}` has shape {:?}", t.dims())));
            }
        }
        self.buffers = state;
        Ok(())
    }
}

/// Global L2 norm of the gradients present in `grads` for `params`.
pub fn grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, v) in params {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimConfig::stage1();
        assert!((cfg.lr_at(256, 0, 100) - 0.05).abs() < 1e-12);
        assert!((cfg.lr_at(256, 50, 100) - 0.025).abs() < 1e-12);
        assert!(cfg.lr_at(256, 100, 100).abs() < 1e-12);
        assert!((cfg.base_lr(16) - 0.05 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn momentum_matches_hand_computation() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::stage2()
        };
        let mut opt = Sgd::new(vec![("w".into(), v.clone())], &cfg).unwrap();
        // loss = w², grad = 2w
        let mut w = 1.0f64;
        let mut buf = 0.0f64;
        for i in 0..3 {
            let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&g, 0.1).unwrap();
            buf = if i == 0 { 2.0 * w } else { 0.9 * buf + 2.0 * w };
            w -= 0.1 * buf;
        }
        let got = v.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((got - w).abs() < 1e-12);
    }
}
