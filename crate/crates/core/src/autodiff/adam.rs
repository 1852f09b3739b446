use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A named trainable tensor with an optional pending gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Adds `g` into the pending gradient.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(numel: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            config,
        }
    }
}

/// Bias-corrected Adam update in place. Consumes the pending gradient.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState) -> Result<()> {
    let grad = param
        .grad
        .take()
        .ok_or_else(|| Error::Usage(format!("parameter {} has no gradient", param.name)))?;
    if grad.len() != param.value.numel() || state.m.len() != grad.len() {
        return Err(Error::dims(
            "adam_step",
            param.value.shape(),
            &[grad.len(), state.m.len()],
        ));
    }
    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, p) in param.value.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

/// Adam over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Parameter], config: AdamConfig) -> Self {
        Self {
            states: params
                .iter()
                .map(|p| AdamState::new(p.value.numel(), config))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(Error::Usage("optimizer/parameter count mismatch".into()));
        }
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.numel()]);
            }
            adam_step(p, s)?;
        }
        Ok(())
    }
}
