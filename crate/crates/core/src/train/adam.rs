//! Adam with bias correction, and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModelParameters, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ModelParameters<T>,
    pub v: ModelParameters<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One Adam update. A non-finite gradient leaves parameters and state
/// untouched and names the offending tensor.
pub fn adam_step<T: Real>(
    params: &mut ModelParameters<T>,
    grads: &ModelParameters<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.config != grads.config || params.convs.len() != grads.convs.len() {
        return Err(Error::Validation("gradients do not match the parameters".into()));
    }
    for (name, _, g) in grads.tensors() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}[{i}]: {}", g[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(cfg.eps));
    let (tc1, tc2, tlr) = (T::of(c1), T::of(c2), T::of(lr));
    let one = T::one();
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, (_, _, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = tb1 * m[i] + (one - tb1) * gi;
            v[i] = tb2 * v[i] + (one - tb2) * gi * gi;
            let mh = m[i] * tc1;
            let vh = v[i] * tc2;
            p[i] = p[i] - tlr * mh / (vh.sqrt() + teps);
        }
    }
    Ok(())
}

/// `lr0 / decay_factor^floor(iteration / decay_every)`.
pub fn lr_at(iteration: u64, lr0: f64, decay_factor: f64, decay_every: u64) -> f64 {
    let k = iteration / decay_every.max(1);
    lr0 / decay_factor.powi(k.min(i32::MAX as u64) as i32)
}
