//! Master copies of trainable parameters, kept outside any graph.
//!
//! Every training step clones the current values into a fresh graph as leaf
//! tensors, reads gradients back after the reverse sweep, and lets the
//! optimizer update the store. Tensor order is insertion order and is part of
//! the checkpoint contract.

use rand::Rng;

use super::graph::{Graph, Tensor};
use super::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a named tensor. Names must be unique; order is significant.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<usize> {
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "parameter {name:?} has shape {shape:?} but {} data elements",
                data.len()
            )));
        }
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(self.tensors.len() - 1)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count across all tensors.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Register every tensor as a differentiable leaf, in store order.
    pub fn register<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Vec<Tensor>> {
        self.tensors
            .iter()
            .map(|t| {
                let data: Vec<T> = t.data.iter().map(|&v| T::from_f64(v as f64)).collect();
                g.leaf(&t.shape, data)
            })
            .collect()
    }

    /// Register every tensor as a frozen (non-differentiable) leaf.
    pub fn register_frozen<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Vec<Tensor>> {
        self.tensors
            .iter()
            .map(|t| {
                let data: Vec<T> = t.data.iter().map(|&v| T::from_f64(v as f64)).collect();
                g.input(&t.shape, data)
            })
            .collect()
    }

    /// Gradients for all tensors after a backward pass over a graph where
    /// `handles` came from [`ParamStore::register`].
    pub fn collect_grads<T: Scalar>(
        &self,
        g: &Graph<T>,
        handles: &[Tensor],
    ) -> Result<Vec<Vec<f32>>> {
        if handles.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "gradient handle count {} does not match parameter count {}",
                handles.len(),
                self.tensors.len()
            )));
        }
        handles
            .iter()
            .zip(&self.tensors)
            .map(|(&h, t)| {
                let grad = g.grad(h).ok_or_else(|| {
                    Error::Config(format!("parameter {:?} has no gradient", t.name))
                })?;
                Ok(grad.iter().map(|v| v.as_f64() as f32).collect())
            })
            .collect()
    }
}

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f32> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}
