//! Exponential moving average of model parameters, kept fully separate
//! from the live training weights and used only for evaluation.

use crate::error::{Error, Result};
use crate::train::ModelParams;

#[derive(Clone, Debug)]
pub struct EmaParams {
    pub shadow: ModelParams,
    pub decay: f64,
}

impl EmaParams {
    /// Shadow starts as a copy of the initial parameters.
    pub fn new(params: &ModelParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidConfig(format!(
                "EMA decay must be in [0, 1], got {decay}"
            )));
        }
        Ok(EmaParams {
            shadow: params.clone(),
            decay,
        })
    }
}

/// shadow <- decay * shadow + (1 - decay) * params, per tensor.
pub fn ema_update(ema: &mut EmaParams, params: &ModelParams) -> Result<()> {
    let d = ema.decay;
    let mut s_t = ema.shadow.tensors_mut();
    let p_t = params.tensors();
    if s_t.len() != p_t.len() {
        return Err(Error::shape("ema_update", "parameter layout changed"));
    }
    for (s, p) in s_t.iter_mut().zip(&p_t) {
        if s.rows() != p.rows() || s.cols() != p.cols() {
            return Err(Error::shape("ema_update", "tensor shape changed"));
        }
        for (sv, &pv) in s.values_mut().iter_mut().zip(p.values()) {
            *sv = d * *sv + (1.0 - d) * pv;
        }
    }
    Ok(())
}
