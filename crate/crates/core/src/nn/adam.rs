use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter range.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        OptimizerState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(state: &mut OptimizerState<T>, params: &mut [T], grads: &[T]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::shape(state.m.len(), params.len().max(grads.len())));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let corr1 = T::of(1.0 / (1.0 - c.beta1.powi(t)));
    let corr2 = T::of(1.0 / (1.0 - c.beta2.powi(t)));
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let lr = T::of(c.learning_rate);
    let eps = T::of(c.epsilon);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m * corr1;
        let v_hat = *v * corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
