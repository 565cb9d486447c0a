use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            config,
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState) -> Result<(), NeuralError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(NeuralError::Shape("gradient/parameter count mismatch".into()));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(NeuralError::NonFiniteGradient);
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, g), m), v) in store.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() {
            return Err(NeuralError::Shape("gradient shape mismatch".into()));
        }
        for i in 0..g.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
