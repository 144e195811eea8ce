//! Named, seeded storage for every learnable array of a model.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn path_hash(path: &str) -> u64 {
    path.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn uniform(shape: &[usize], bound: f64, seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Learnable arrays keyed by dotted path (`ndpt.3.attn.qkv.weight`).
///
/// Each array is seeded from the store seed and its own path, so values do
/// not depend on construction order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    seed: u64,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            seed,
            trainable: true,
            vars: BTreeMap::new(),
        }
    }

    /// A store whose handles are not tracked for backprop. Forward passes
    /// through it keep no graph, so intermediates are freed as they go.
    /// [`set`](Self::set) still reaches every handle.
    pub fn frozen(dtype: DType, seed: u64) -> Self {
        Self { trainable: false, ..Self::new(dtype, seed) }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a parameter and returns a tensor sharing its storage.
    pub fn create(&mut self, path: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(path) {
            return Err(Error::invalid("ParamStore::create", format!("duplicate path `{path}`")));
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &Device::Cpu)?,
            Init::Const(v) => (Tensor::ones(shape, self.dtype, &Device::Cpu)? * v)?,
            Init::FanInUniform { fan_in } => uniform(
                shape,
                1.0 / (fan_in.max(1) as f64).sqrt(),
                self.seed ^ path_hash(path),
                self.dtype,
            )?,
        };
        let var = Var::from_tensor(&t)?;
        // `detach` shares storage, so in-place updates stay visible.
        let handle = if self.trainable { var.as_tensor().clone() } else { var.as_tensor().detach() };
        self.vars.insert(path.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, path: &str) -> Option<&Var> {
        self.vars.get(path)
    }

    /// Overwrites a parameter in place; every module holding it sees the new value.
    pub fn set(&self, path: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(path)
            .ok_or_else(|| Error::invalid("ParamStore::set", format!("no parameter `{path}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                expected: var.dims().to_vec(),
                actual: value.dims().to_vec(),
            });
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Zeros every parameter whose path starts with `prefix`.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut hit = 0;
        for (path, var) in &self.vars {
            if path.starts_with(prefix) {
                var.set(&var.zeros_like()?)?;
                hit += 1;
            }
        }
        Ok(hit)
    }

    /// Refills every parameter with `U(-scale, scale)` noise, including the
    /// ones that are zero- or one-initialized by construction.
    pub fn randomize(&self, seed: u64, scale: f64) -> Result<()> {
        for (path, var) in &self.vars {
            let t = uniform(var.dims(), scale, seed ^ path_hash(path), self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Element counts grouped by the first `depth` path segments.
    pub fn breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (path, var) in &self.vars {
            let key = path.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += var.elem_count();
        }
        out
    }

    /// SHA-256 over paths, shapes and f64-widened values, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (path, var) in &self.vars {
            h.update(path.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
            {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
