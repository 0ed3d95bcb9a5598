use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// He-normal for ReLU-family activations.
    KaimingNormal { fan_in: usize },
    Uniform { bound: f64 },
    Normal { std: f64 },
}

struct Param {
    var: Var,
    trainable: bool,
}

struct Inner {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter storage. Every tensor a model owns lives here,
/// including non-trainable buffers such as batch-norm running statistics.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                params: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().params.keys().cloned().collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.lock()
            .params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn named_trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.lock()
            .params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lock().params.get(name).map(|p| p.var.clone())
    }

    /// Detached copies of every tensor, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.lock()
            .params
            .iter()
            .map(|(n, p)| Ok((n.clone(), p.var.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every named tensor; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for name in inner.params.keys() {
            if !tensors.contains_key(name) {
                return Err(Error::validation(format!("weights are missing tensor '{name}'")));
            }
        }
        for name in tensors.keys() {
            if !inner.params.contains_key(name) {
                return Err(Error::validation(format!("weights contain unknown tensor '{name}'")));
            }
        }
        for (name, p) in &inner.params {
            let t = &tensors[name];
            if t.dims() != p.var.dims() {
                return Err(Error::validation(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Overwrites the tensors whose names start with `prefix`; tensors in the
    /// file outside the prefix are ignored. Returns the number loaded.
    pub fn load_prefix(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<usize> {
        let inner = self.lock();
        let mut n = 0;
        for (name, p) in inner.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::validation(format!("pretrained weights are missing tensor '{name}'")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::validation(format!(
                    "pretrained tensor '{name}' has shape {:?}, model expects {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
            n += 1;
        }
        Ok(n)
    }

    /// Sets every tensor under `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let inner = self.lock();
        let mut n = 0;
        for (_, p) in inner.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            p.var.set(&p.var.zeros_like()?)?;
            n += 1;
        }
        Ok(n)
    }

    fn create(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.lock();
        if inner.params.contains_key(&name) {
            return Err(Error::validation(format!("parameter '{name}' registered twice")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Const(v) => vec![v; count],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).expect("positive std");
                (0..count).map(|_| d.sample(&mut inner.rng)).collect()
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..count).map(|_| d.sample(&mut inner.rng)).collect()
            }
            Init::Uniform { bound } => {
                let d = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
                (0..count).map(|_| d.sample(&mut inner.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.params.insert(
            name,
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }
}

/// Hierarchical view into a [`ParamStore`] that prefixes names with `a.b.c`.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.store.create(self.full(name), shape, init, true)?.as_tensor().clone())
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape, init, false)
    }
}
