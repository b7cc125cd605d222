//! AdaMax: Adam with the infinity norm in place of the second moment.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            alpha: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            delta: 1e-8,
        }
    }
}

/// First moment `m` and exponentially weighted infinity norm `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState<T> {
    pub m: Vec<T>,
    pub u: Vec<T>,
}

impl<T: Scalar> AdamaxState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            u: vec![T::zero(); len],
        }
    }
}

/// One elementwise update at step `t >= 1`:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// u <- max(b2 u, |g|)
/// theta <- theta - alpha / (1 - b1^t) * m / (u + delta)
/// ```
pub fn adamax_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamaxState<T>,
    t: u64,
    cfg: &AdamaxConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adamax step index starts at 1"));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.u.len() != params.len() {
        return Err(Error::shape(
            format!("{} params, grads and moments", params.len()),
            format!("{} grads, {} m, {} u", grads.len(), state.m.len(), state.u.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {i}")));
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let delta = T::from_f64_lossy(cfg.delta);
    let step = T::from_f64_lossy(cfg.alpha / (1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32)));
    let one = T::one();
    for (((theta, &g), m), u) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.u) {
        *m = b1 * *m + (one - b1) * g;
        *u = (b2 * *u).max(g.abs());
        *theta = *theta - step * *m / (*u + delta);
    }
    Ok(())
}
