//! Single-file checkpoints: named raw tensors plus a JSON metadata document,
//! stored as safetensors.
//!
//! Parameters keep their hierarchical names. Optimizer momentum buffers are
//! stored under `optim.momentum.<name>`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "mptp";
const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: u8,
    /// Optimizer steps completed.
    pub step: usize,
    /// Epoch that `step` falls in.
    pub epoch: usize,
    /// Serialized dropout RNG.
    pub rng_state: serde_json::Value,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub momentum: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let t = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (Dtype::F32, t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(name: &str, v: &TensorView<'_>) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let data = v.data();
    let t = match v.dtype() {
        Dtype::F32 => {
            let vals: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let vals: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("`{name}` has unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl CheckpointBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raw: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in &self.params {
            if name.starts_with(MOMENTUM_PREFIX) {
                return Err(Error::Checkpoint(format!("parameter name `{name}` collides with optimizer state")));
            }
            let (d, b) = to_bytes(t)?;
            raw.push((name.clone(), d, t.dims().to_vec(), b));
        }
        for (name, t) in &self.momentum {
            let (d, b) = to_bytes(t)?;
            raw.push((format!("{MOMENTUM_PREFIX}{name}"), d, t.dims().to_vec(), b));
        }
        let views = raw
            .iter()
            .map(|(n, d, s, b)| {
                TensorView::new(*d, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("not a checkpoint bundle: metadata missing".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format_version {} unsupported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = from_view(&name, &view)?;
            match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(p) => momentum.insert(p.to_string(), t),
                None => params.insert(name, t),
            };
        }
        Ok(Self { meta, params, momentum })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Which store entries were overwritten and which kept their fresh init.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RestoreReport {
    pub restored: Vec<String>,
    pub initialized: Vec<String>,
    /// Bundle entries outside the selection.
    pub ignored: Vec<String>,
}

impl std::fmt::Display for RestoreReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "restored {} tensors, freshly initialized {}, ignored {} from the bundle",
            self.restored.len(),
            self.initialized.len(),
            self.ignored.len()
        )
    }
}

/// Copies every bundle tensor whose name satisfies `select` into `store`.
///
/// Selected names must match one-to-one with identical shapes; any
/// discrepancy is an error that lists all offending names.
pub fn restore(store: &ParamStore, params: &BTreeMap<String, Tensor>, select: impl Fn(&str) -> bool) -> Result<RestoreReport> {
    let mut report = RestoreReport::default();
    let mut problems = Vec::new();
    let entries = store.entries();
    for (name, p) in &entries {
        if !select(name) {
            report.initialized.push(name.clone());
            continue;
        }
        match params.get(name) {
            None => problems.push(format!("`{name}` missing from checkpoint")),
            Some(t) if t.dims() != p.var.dims() => problems.push(format!(
                "`{name}` has shape {:?} in checkpoint, {:?} in model",
                t.dims(),
                p.var.dims()
            )),
            Some(_) => {}
        }
    }
    for name in params.keys() {
        if !select(name) {
            report.ignored.push(name.clone());
        } else if store.get(name).is_none() {
            problems.push(format!("`{name}` in checkpoint has no counterpart in model"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!("unmatched names:\n  {}", problems.join("\n  "))));
    }
    for (name, p) in &entries {
        if select(name) {
            p.var.set(&params[name].to_dtype(store.dtype())?)?;
            report.restored.push(name.clone());
        }
    }
    Ok(report)
}
