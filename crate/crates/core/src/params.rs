//! Named parameter storage with deterministic, seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Zeros,
    Const(f64),
    Normal { mean: f64, std: f64 },
    /// He-normal for a layer with the given fan-in.
    He { fan_in: usize },
}

impl Dist {
    fn sample(self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match self {
            Dist::Zeros => vec![0.0; n],
            Dist::Const(c) => vec![c; n],
            Dist::Normal { mean, std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + std * z
                })
                .collect(),
            Dist::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        std * z
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// Every learnable tensor (and persistent buffer) of a model, keyed by a
/// dotted path such as `G.trunk.0.conv1.weight`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, shape: &[usize], values: Vec<f64>, trainable: bool) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable parameters whose name starts with one of `prefixes`.
    pub fn trainable_with_prefix<'a>(&'a self, prefixes: &'a [&'a str]) -> impl Iterator<Item = (&'a str, &'a Var)> + 'a {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .filter(move |(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, e)| (k.as_str(), &e.var))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.var))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for e in self.entries.values() {
            let v = e.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, e) in &self.entries {
            ckpt.push(format!("{prefix}{name}"), e.var.as_tensor())?;
        }
        Ok(())
    }

    /// Overwrites every entry from `ckpt`; each must be present with the same
    /// shape.
    pub fn read_from(&self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, e) in &self.entries {
            let key = format!("{prefix}{name}");
            let stored = ckpt
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if stored.shape != e.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    stored.shape,
                    e.var.dims()
                )));
            }
            let t = stored.to_tensor(&self.device)?.to_dtype(self.dtype)?;
            e.var.set(&t)?;
        }
        Ok(())
    }
}

/// Registers parameters under a name prefix, drawing initial values from a
/// shared seeded generator.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: impl Into<String>) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], dist: Dist) -> Result<Var> {
        let n = shape.iter().product();
        let values = dist.sample(self.rng, n);
        let full = self.full(name);
        self.store.insert(full, shape, values, true)
    }

    /// Persistent non-trainable state (e.g. power-iteration vectors).
    pub fn buffer(&mut self, name: &str, shape: &[usize], dist: Dist) -> Result<Var> {
        let n = shape.iter().product();
        let values = dist.sample(self.rng, n);
        let full = self.full(name);
        self.store.insert(full, shape, values, false)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn gen_seed(&mut self) -> u64 {
        self.rng.random()
    }
}
