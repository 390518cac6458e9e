use serde::{Deserialize, Serialize};

use crate::detector::DetectorState;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam {
            config,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `state` in place.
///
/// Rejects non-finite gradients without touching the state or the moments.
pub fn optimizer_step<T: Real>(state: &mut DetectorState<T>, gradient: &[T], adam: &mut Adam<T>) -> Result<()> {
    if gradient.len() != state.params.len() || adam.m.len() != state.params.len() {
        return Err(Error::LayoutMismatch {
            expected: state.params.len(),
            found: gradient.len(),
        });
    }
    if let Some(index) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    adam.step += 1;
    let c = &adam.config;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let lr = T::lit(c.lr);
    let eps = T::lit(c.eps);
    let t = adam.step as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for (((p, &g), m), v) in state
        .params
        .iter_mut()
        .zip(gradient)
        .zip(adam.m.iter_mut())
        .zip(adam.v.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    state.optimizer_writes += 1;
    Ok(())
}
