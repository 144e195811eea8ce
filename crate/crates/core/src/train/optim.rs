//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment estimates per parameter path.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched, weight decay included.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (path, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients may still reference the forward graph.
            let g = &g.detach();
            let m = match self.m.get(path) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(path) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let p = var.as_tensor();
            let next = ((p * (1.0 - lr * c.weight_decay))? - (update * lr)?)?;
            var.set(&next.detach())?;
            self.m.insert(path.to_string(), m.detach());
            self.v.insert(path.to_string(), v.detach());
        }
        Ok(())
    }

    /// Rejects moment entries that do not belong to `store` or have the wrong shape.
    pub fn check_against(&self, store: &ParamStore) -> Result<()> {
        for (path, t) in self.m.iter().chain(&self.v) {
            match store.get(path) {
                Some(var) if var.dims() == t.dims() => {}
                Some(var) => {
                    return Err(Error::ShapeMismatch {
                        op: "AdamW::check_against",
                        expected: var.dims().to_vec(),
                        actual: t.dims().to_vec(),
                    })
                }
                None => return Err(Error::invalid("AdamW::check_against", format!("unknown parameter `{path}`"))),
            }
        }
        Ok(())
    }
}
