//! Adam optimizer over the model's parameter tensors.

use crate::error::{Error, Result};
use crate::train::ModelParams;

/// Moment accumulators and step counter. Moments are stored in parameter
/// layout so they stay in lockstep with [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Gradients are validated for shape and
/// finiteness before any parameter is touched, so an error leaves `params`
/// unmodified.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<()> {
    let names = grads.tensor_names();
    for (name, g) in names.iter().zip(grads.tensors()) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient tensor {name}")));
        }
    }
    {
        let p_shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| (t.rows(), t.cols())).collect();
        let g_shapes: Vec<(usize, usize)> = grads.tensors().iter().map(|t| (t.rows(), t.cols())).collect();
        if p_shapes != g_shapes {
            return Err(Error::shape("adam_step", "gradient layout differs from parameters"));
        }
    }

    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (lr, b1, b2, eps) = (state.lr, state.beta1, state.beta2, state.epsilon);

    let mut p_t = params.tensors_mut();
    let g_t = grads.tensors();
    let mut m_t = state.m.tensors_mut();
    let mut v_t = state.v.tensors_mut();
    for idx in 0..p_t.len() {
        let p = p_t[idx].values_mut();
        let g = g_t[idx].values();
        let m = m_t[idx].values_mut();
        let v = v_t[idx].values_mut();
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
