//! Run configuration, read from TOML. Every field has a default.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::LossConfig;
use crate::model::{Ablation, ModelConfig};
use crate::optim::OptimConfig;
use crate::pretrain::{AugmentConfig, AugmentationPolicy};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Per-channel standardization; off unless set.
    pub normalize: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub optim: OptimConfig,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            max_steps: None,
            checkpoint_every: 500,
            optim: OptimConfig::stage1(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            max_steps: None,
            checkpoint_every: 500,
            optim: OptimConfig::stage2(),
        }
    }

    /// Steps in a run over `n` samples with partial batches dropped.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n / self.batch_size.max(1);
        let all = per_epoch * self.epochs;
        self.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("{name}.batch_size must be at least 2 (batch norm)")));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{name}.epochs must be positive")));
        }
        self.optim.validate()
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

fn default_stage2() -> StageConfig {
    StageConfig::stage2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: Precision,
    /// Use the rayon pool for per-sample work.
    pub parallel: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    pub augment: AugmentConfig,
    pub ablation: Ablation,
    /// Keep every `ppe.*` tensor fixed during stage 2.
    pub freeze_ppe: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            parallel: true,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            augment: AugmentConfig::default(),
            ablation: Ablation::default(),
            freeze_ppe: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a file; relative paths inside it resolve against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.train_manifest.as_mut().map(fix);
        cfg.data.eval_manifest.as_mut().map(fix);
        fix(&mut cfg.output_dir);
        if let crate::text_encoder::EmbedderConfig::Pretrained { dir } = &mut cfg.model.embedder {
            fix(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.policy()?;
        Ok(())
    }

    pub fn policy(&self) -> Result<AugmentationPolicy> {
        AugmentationPolicy::from_config(&self.augment)
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        let [h, w] = self.model.ppe.image_size;
        (h, w)
    }

    /// Small preset used by examples and tests: `image`² inputs, `C = channels`.
    pub fn toy(image: usize, channels: usize) -> Self {
        Self {
            model: ModelConfig::toy(image, channels),
            ..Self::default()
        }
    }
}
