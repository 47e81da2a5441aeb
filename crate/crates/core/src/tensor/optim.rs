use std::collections::HashMap;

use super::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First/second moment estimates and step count for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamMoments,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(Error::shape(
            "adam_update",
            &[param.len(), state.m.len()],
            &[grad.len(), state.v.len()],
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a [`ParamStore`].
///
/// Only parameters present in the gradient map are touched: a parameter that
/// did not take part in the forward pass keeps its value and its moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<ParamId, AdamMoments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for (id, g) in grads.iter() {
            let len = store.get(id).numel();
            let state = self
                .state
                .entry(id)
                .or_insert_with(|| AdamMoments::zeros(len));
            adam_update(store.data_mut(id), g.data(), state, &self.config)?;
        }
        Ok(())
    }

    pub fn moments(&self, id: ParamId) -> Option<&AdamMoments> {
        self.state.get(&id)
    }
}
