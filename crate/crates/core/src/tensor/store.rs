//! Named parameter store with per-entry Adam state.

use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Adam hyperparameters. The learning rate is passed per step; the rest
/// are the optimizer's standard defaults.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Vec<f64>>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: u64,
}

/// Ordered map name -> parameter tensor, with gradient accumulators and
/// Adam moments. Iteration order is deterministic (sorted by name).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub(crate) entries: BTreeMap<String, Entry>,
    adam: AdamParams,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        if self.entries.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.into() });
        }
        let n = value.numel();
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: None,
                adam_m: vec![0.0; n],
                adam_v: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| TensorError::UnknownParam { name: name.into() })
    }

    /// Overwrite a parameter value, keeping shape. Resets nothing else.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.to_string() })?;
        if entry.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<(), TensorError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam { name: name.to_string() })?;
        assert_eq!(
            grad.len(),
            entry.value.numel(),
            "gradient length mismatch for `{name}`"
        );
        match &mut entry.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(grad) {
                    *gi += di;
                }
            }
            None => entry.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).and_then(|e| e.grad.as_deref())
    }

    /// Drop all accumulated gradients; the next Adam step requires fresh
    /// accumulation.
    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = None;
        }
    }

    /// Global L2 norm of all accumulated gradients (missing grads count as
    /// zero). Used for optional norm clipping.
    pub fn grad_sq_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for entry in self.entries.values_mut() {
            if let Some(g) = &mut entry.grad {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// One Adam update with bias-corrected moments. Every entry must have
    /// an accumulated gradient; gradients are zeroed afterwards.
    pub fn adam_step(&mut self, learning_rate: f64) -> Result<(), TensorError> {
        let AdamParams { beta1, beta2, eps } = self.adam;
        for (name, entry) in self.entries.iter_mut() {
            let Some(grad) = entry.grad.take() else {
                return Err(TensorError::MissingGrad { name: name.clone() });
            };
            entry.step += 1;
            let t = entry.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let value = entry.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                entry.adam_m[i] = beta1 * entry.adam_m[i] + (1.0 - beta1) * g;
                entry.adam_v[i] = beta2 * entry.adam_v[i] + (1.0 - beta2) * g * g;
                let m_hat = entry.adam_m[i] / bc1;
                let v_hat = entry.adam_v[i] / bc2;
                value[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Clip the joint gradient of several stores to a maximum global L2 norm.
pub fn clip_global_grad_norm(stores: &mut [&mut ParamStore], max_norm: f64) {
    let total: f64 = stores.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let factor = max_norm / total;
        for store in stores.iter_mut() {
            store.scale_grads(factor);
        }
    }
}
