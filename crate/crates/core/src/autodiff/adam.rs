//! Adam optimizer with bias correction.
//!
//! Moment buffers are stored per parameter tensor in f32 alongside the
//! parameters; the per-element update itself runs in f64. Moments are plain
//! data so training can checkpoint and resume them.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// Fresh optimizer with zeroed moments matching `store`'s tensors.
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let m = store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        let v = store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Ok(Adam { cfg, step_count: 0, m, v })
    }

    /// Rebuild from checkpointed state. Moment layouts must match `store`.
    pub fn restore(
        cfg: AdamConfig,
        store: &ParamStore,
        step_count: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer state has {} / {} tensors, parameters have {}",
                m.len(),
                v.len(),
                store.len()
            )));
        }
        for (i, t) in store.tensors().iter().enumerate() {
            if m[i].len() != t.data.len() || v[i].len() != t.data.len() {
                return Err(Error::OptimizerShapeDrift {
                    name: t.name.clone(),
                    state_len: m[i].len(),
                    param_len: t.data.len(),
                });
            }
        }
        Ok(Adam { cfg, step_count, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// One Adam update: `grads` must align with `store` tensor order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Config(format!(
                "got {} gradient tensors for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, t) in store.tensors().iter().enumerate() {
            if grads[i].len() != t.data.len() || self.m[i].len() != t.data.len() {
                return Err(Error::OptimizerShapeDrift {
                    name: t.name.clone(),
                    state_len: self.m[i].len().min(grads[i].len()),
                    param_len: t.data.len(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, p) in tensor.data.iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                let mj = self.cfg.beta1 * m[j] as f64 + (1.0 - self.cfg.beta1) * g;
                let vj = self.cfg.beta2 * v[j] as f64 + (1.0 - self.cfg.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                *p = (*p as f64 - self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon))
                    as f32;
            }
        }
        Ok(())
    }
}
