//! Adam optimizer over a flat parameter vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient contains a non-finite value")]
    NonFiniteGrad,
    #[error("parameter/gradient/state lengths disagree")]
    LengthMismatch,
}

/// Adam hyperparameters. The paper-scale defaults are lr 1e-5 with batch
/// size 32; toy-scale runs override lr in their run config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize, hyper: AdamParams) -> Self {
        Self { hyper, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }
}

/// One Adam update with bias correction:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(OptimError::LengthMismatch);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGrad);
    }
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}
