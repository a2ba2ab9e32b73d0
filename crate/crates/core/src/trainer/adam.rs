use serde::{Deserialize, Serialize};

use crate::gradcore::Real;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), in place.
///
/// # Panics
/// If the slices differ in length or `t == 0`.
pub fn adam_step<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, config: &AdamConfig) {
    assert!(t >= 1, "adam step index is 1-based");
    assert!(
        param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len(),
        "adam buffers differ in length"
    );
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - config.beta1.powi(t as i32));
    let c2 = T::from_f64_lossy(1.0 - config.beta2.powi(t as i32));
    let lr = T::from_f64_lossy(config.learning_rate);
    let eps = T::from_f64_lossy(config.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
