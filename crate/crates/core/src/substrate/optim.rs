//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};
use crate::substrate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Named map of parameters with per-parameter Adam moments and a shared
/// step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let m = Tensor::zeros(&value.shape);
        let v = Tensor::zeros(&value.shape);
        self.params.insert(name.into(), Param { value, m, v });
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().map(|(k, p)| (k, &p.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub(crate) fn raw(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub(crate) fn raw_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    /// Standard Adam update with bias correction; increments the step
    /// counter by exactly one.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in grads {
            let param = self.params.get_mut(name).ok_or_else(|| {
                ChoreoError::contract(format!("gradient for unknown parameter `{name}`"))
            })?;
            if grad.shape != param.value.shape {
                return Err(ChoreoError::contract(format!(
                    "gradient shape {:?} does not match parameter `{name}` shape {:?}",
                    grad.shape, param.value.shape
                )));
            }
            for i in 0..grad.data.len() {
                let g = grad.data[i];
                param.m.data[i] = ADAM_BETA1 * param.m.data[i] + (1.0 - ADAM_BETA1) * g;
                param.v.data[i] = ADAM_BETA2 * param.v.data[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = param.m.data[i] / bc1;
                let v_hat = param.v.data[i] / bc2;
                param.value.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Scale all gradients by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`; directions are preserved.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let total: f64 = grads
        .values()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
}

/// Global L2 norm across a gradient map.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
