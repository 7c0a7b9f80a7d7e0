use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First/second moment accumulators, created lazily per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if !p.value.same_shape(g) {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        let shape = g.shape().to_vec();
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
        }
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
        }
        let m = &state.first[name];
        let v = &state.second[name];
        let p = params.get_mut(name)?;
        for ((pv, mv), vv) in p.value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
