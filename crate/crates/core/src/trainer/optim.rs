//! Adam with an exponentially decaying learning rate.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step. Returns the new parameters and state.
pub fn adam_update(state: &AdamState, theta: &[f64], grad: &[f64], lr: f64) -> Result<(Vec<f64>, AdamState)> {
    if theta.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradient entries, state of {}",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mut next = state.clone();
    next.step += 1;
    let k = next.step as i32;
    let c1 = 1.0 - state.beta1.powi(k);
    let c2 = 1.0 - state.beta2.powi(k);
    let mut out = theta.to_vec();
    for i in 0..theta.len() {
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = next.m[i] / c1;
        let v_hat = next.v[i] / c2;
        out[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok((out, next))
}

/// lr0 · rate^(iter / decay_steps), continuous exponent.
pub fn lr_at(iter: usize, lr0: f64, decay_steps: usize, decay_rate: f64) -> f64 {
    lr0 * decay_rate.powf(iter as f64 / decay_steps as f64)
}
