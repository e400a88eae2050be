use std::collections::BTreeMap;

use crate::error::{NdiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A trainable tensor with its accumulated gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        ParamEntry {
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }
}

/// Named parameters, iterated in name order.
///
/// Gradients accumulate across backward passes until [`ParamStore::zero_grad`]
/// or an Adam step clears them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| NdiffError::UnknownParam(name.to_string()))
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NdiffError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.value)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.entry(name)?.value.item()
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.grad)
    }

    /// Overwrites a value, keeping optimizer state.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self.entry_mut(name)?;
        if entry.value.shape() != value.shape() {
            return Err(NdiffError::shapes("set_value", entry.value.shape(), value.shape()));
        }
        entry.value = value;
        Ok(())
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let entry = self.entry_mut(name)?;
        if entry.grad.shape() != grad.shape() {
            return Err(NdiffError::shapes("accumulate", entry.grad.shape(), grad.shape()));
        }
        entry
            .grad
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// True when every gradient entry is exactly zero.
    pub fn grads_are_zero(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.grad.data().iter().all(|g| *g == 0.0))
    }

    /// One bias-corrected Adam step on `name`; clears its gradient.
    pub fn adam_update(&mut self, name: &str, cfg: &AdamConfig) -> Result<&Tensor> {
        let entry = self.entry_mut(name)?;
        entry.step_count += 1;
        let t = entry.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ParamEntry {
            value,
            grad,
            adam_m,
            adam_v,
            ..
        } = entry;
        for (((w, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(adam_m.data_mut())
            .zip(adam_v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *g = 0.0;
        }
        Ok(&entry.value)
    }

    /// Adam step on every entry.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            self.adam_update(&name, cfg).expect("name taken from the store");
        }
    }

    /// Adam step on entries whose name satisfies `keep`; others only have
    /// their gradient cleared.
    pub fn adam_step_filtered(&mut self, cfg: &AdamConfig, keep: impl Fn(&str) -> bool) {
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            if keep(&name) {
                self.adam_update(&name, cfg).expect("name taken from the store");
            } else if let Some(e) = self.entries.get_mut(&name) {
                e.grad.data_mut().fill(0.0);
            }
        }
    }
}
