use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Gradients by parameter name, as produced by [`crate::Session::grads`].
pub type Grads = BTreeMap<String, Tensor>;

pub trait Optimizer {
    /// Updates every trainable entry of `store`; missing gradients count as
    /// zero. Frozen entries are never written.
    fn step(&mut self, store: &mut ParameterStore, grads: &Grads, lr: f64) -> Result<()>;

    fn steps_taken(&self) -> u64;
}

fn checked_grad<'g>(grads: &'g Grads, name: &str, numel: usize) -> Result<Option<&'g [f32]>> {
    match grads.get(name) {
        None => Ok(None),
        Some(g) => {
            if g.numel() != numel {
                return Err(Error::Dimension {
                    op: "optimizer gradient",
                    lhs: vec![numel],
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "{name}[{i}] = {}",
                    g.data()[i]
                )));
            }
            Ok(Some(g.data()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices and higher-rank tensors only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    /// Names holding moment state; always a subset of trainable entries.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, store: &mut ParameterStore, grads: &Grads, lr: f64) -> Result<()> {
        for (name, p) in store.iter() {
            if p.trainable {
                checked_grad(grads, name, p.value.numel())?;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let g = grads.get(name).map(|g| g.data());
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if p.value.shape().len() >= 2 {
                1.0 - lr * self.cfg.weight_decay
            } else {
                1.0
            };
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| f64::from(g[i]));
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
                *w = (f64::from(*w) * decay - lr * update) as f32;
            }
        }
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub cfg: SgdConfig,
    buffers: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            buffers: BTreeMap::new(),
            step: 0,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParameterStore, grads: &Grads, lr: f64) -> Result<()> {
        for (name, p) in store.iter() {
            if p.trainable {
                checked_grad(grads, name, p.value.numel())?;
            }
        }
        self.step += 1;
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let g = grads.get(name).map(|g| g.data());
            let buf = self.buffers.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| f64::from(g[i])) + self.cfg.weight_decay * f64::from(*w);
                buf[i] = self.cfg.momentum * buf[i] + gi;
                *w = (f64::from(*w) - lr * buf[i]) as f32;
            }
        }
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.step
    }
}
