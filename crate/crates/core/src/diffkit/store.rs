use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One trainable tensor with its gradient slot and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
        }
    }
}

/// Named parameters in name order. Gradient and moment tensors always
/// share the parameter's shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or replaces) a parameter, resetting its optimizer state.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn entry(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    fn entry_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.entry(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entry_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entry(name).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entry_mut(name).grad
    }

    /// `grad[name] += g`.
    pub fn accumulate(&mut self, name: &str, g: &Tensor) -> Result<()> {
        self.entry_mut(name).grad.add_assign(g)
    }

    /// Adds `src` rows into the listed gradient rows of `name`.
    pub fn accumulate_rows(&mut self, name: &str, idx: &[usize], src: &Tensor) {
        self.entry_mut(name).grad.scatter_add_rows(idx, src);
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Copies of all parameter values, for best-epoch snapshots.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snap: &BTreeMap<String, Tensor>) {
        for (k, v) in snap {
            if let Some(p) = self.params.get_mut(k) {
                p.value = v.clone();
            }
        }
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

/// Bias-corrected Adam with decoupled weight decay; gradients are zeroed
/// after the update.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    adam_step_except(store, cfg, &[])
}

/// [`adam_step`] that leaves the parameters named in `frozen` untouched.
pub fn adam_step_except(store: &mut ParameterStore, cfg: &AdamConfig, frozen: &[&str]) -> Result<()> {
    for (name, p) in &store.params {
        if !p.grad.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in store.params.iter_mut() {
        if frozen.contains(&name.as_str()) {
            p.grad.fill(0.0);
            continue;
        }
        let Param { value, grad, m, v } = p;
        for (((w, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
        grad.fill(0.0);
    }
    Ok(())
}
