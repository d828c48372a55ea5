//! Named parameter storage.
//!
//! Every learnable tensor and every normalization buffer lives in a
//! [`ParamStore`] under a dot-separated hierarchical name such as
//! `ppe.down.1.block.attn.qkv.weight`. Those names are the stable contract
//! for checkpoint export and for carrying encoder weights from Siamese
//! pretraining into segmentation training.
//!
//! Initial values are drawn from a ChaCha stream keyed by `(seed, name)`,
//! so a parameter's initialization does not depend on construction order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shared stream for stochastic layers (dropout). Its state is checkpointed.
pub type SharedRng = Arc<Mutex<ChaCha8Rng>>;

pub fn lock_rng(rng: &SharedRng) -> MutexGuard<'_, ChaCha8Rng> {
    rng.lock().unwrap_or_else(|e| e.into_inner())
}

/// Stable 64-bit seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// Running statistics; persisted but never receives gradient.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

#[derive(Clone)]
pub struct ParamStore {
    params: Arc<Mutex<BTreeMap<String, Param>>>,
    rng: SharedRng,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.len())
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: Arc::new(Mutex::new(BTreeMap::new())),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout")))),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self) -> SharedRng {
        self.rng.clone()
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Param>> {
        self.params.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.lock().get(name).cloned()
    }

    /// All entries in name order.
    pub fn entries(&self) -> Vec<(String, Param)> {
        self.lock().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    /// Optimizer-visible weights whose name passes `include`.
    pub fn trainable(&self, include: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .filter(|(name, p)| p.kind == ParamKind::Weight && include(name))
            .map(|(name, p)| (name.clone(), p.var.clone()))
            .collect()
    }

    /// Deep copy of every tensor, for before/after comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.lock()
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    fn create(&self, name: String, shape: Shape, init: Init, kind: ParamKind) -> Result<Var> {
        let mut map = self.lock();
        if map.contains_key(&name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &name));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &name));
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        map.insert(name, Param { var: var.clone(), kind });
        Ok(var)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        Scope {
            store: self.store.clone(),
            prefix: self.path(&name.to_string()),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn weight(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let var = self
            .store
            .create(self.path(name), shape.into(), init, ParamKind::Weight)?;
        Ok(var.as_tensor().clone())
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .create(self.path(name), shape.into(), init, ParamKind::Buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let a = ParamStore::new(7, DType::F32);
        a.root().weight("x", 5, Init::Uniform(1.0)).unwrap();
        let ya = a.root().weight("y", 5, Init::Uniform(1.0)).unwrap();

        let b = ParamStore::new(7, DType::F32);
        let yb = b.root().weight("y", 5, Init::Uniform(1.0)).unwrap();
        assert_eq!(ya.to_vec1::<f32>().unwrap(), yb.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let s = ParamStore::new(0, DType::F32);
        let root = s.root().pp("a");
        root.weight("w", 2, Init::Const(0.0)).unwrap();
        assert!(root.weight("w", 2, Init::Const(0.0)).is_err());
        assert_eq!(s.names(), vec!["a.w".to_string()]);
    }

    #[test]
    fn buffers_are_not_trainable() {
        let s = ParamStore::new(0, DType::F32);
        s.root().weight("w", 2, Init::Const(1.0)).unwrap();
        s.root().buffer("running_mean", 2, Init::Const(0.0)).unwrap();
        let names: Vec<_> = s.trainable(|_| true).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["w".to_string()]);
    }
}
