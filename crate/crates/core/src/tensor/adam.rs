//! Adam optimizer over a [`Parameters`] collection.

use super::Parameters;
use crate::error::{CodecError, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one pair of buffers per parameter,
/// in the parameters' iteration order.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update. Requires gradients populated by a preceding backward.
pub fn adam_step(
    params: &mut Parameters,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    if state.m.is_empty() {
        for (_, t) in params.iter() {
            state.m.push(vec![0.0; t.len()]);
            state.v.push(vec![0.0; t.len()]);
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (name, t)) in params.iter_mut().enumerate() {
        let g = t
            .grad
            .as_ref()
            .ok_or_else(|| CodecError::MissingGrad(name.to_string()))?
            .clone();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..t.data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            t.data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
