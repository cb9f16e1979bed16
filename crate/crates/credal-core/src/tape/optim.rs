//! Parameter storage, Glorot initialization, and Adam with decoupled weight
//! decay. Parameters keep insertion order so checkpoints and optimizer state
//! stay aligned without any name lookups in the hot path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    /// Total scalar coordinate count across all tensors.
    pub fn num_coordinates(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Map a flat coordinate index to (entry index, offset within tensor).
    pub fn locate(&self, mut coord: usize) -> Option<(usize, usize)> {
        for (i, (_, t)) in self.entries.iter().enumerate() {
            if coord < t.len() {
                return Some((i, coord));
            }
            coord -= t.len();
        }
        None
    }
}

/// Glorot (Xavier) uniform init: U(-a, a) with a = sqrt(6 / (rows + cols)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second-moment accumulators, aligned with a `ParamSet` by position.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.entries().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.entries().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    /// One update. Weight decay is decoupled (applied directly to the
    /// parameter, outside the adaptive term). A `None` gradient means zero.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ParamSet,
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient for {:?} is non-finite",
                        params.entries()[i].0
                    )));
                }
                if g.shape() != params.tensor_at(i).shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!(
                            "gradient {:?} vs parameter {:?} for {:?}",
                            g.shape(),
                            params.tensor_at(i).shape(),
                            params.entries()[i].0
                        ),
                    ));
                }
            }
            let p = params.tensor_at_mut(i).as_mut_slice();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let g = grad.as_ref().map_or(0.0, |g| g.as_slice()[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= cfg.lr * cfg.weight_decay * p[j];
                p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
