//! Adam optimizer with bias correction; moment state is held in 64-bit
//! regardless of the parameter scalar type so update arithmetic is stable and
//! reproducible.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Scalar;

/// First and second moment estimates, parallel to the parameter registry.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Completed steps; bias correction uses `t + 1` during the next step.
    t: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParamSet<T>) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, _, v)| v.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One Adam update over every parameter:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, bias-corrected `m̂`, `v̂`,
/// then `p ← p − lr·m̂/(√v̂ + ε)`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state covers {} tensors, parameter set has {}",
            state.m.len(),
            params.len()
        )));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (value, grad)) in params.iter_value_grad_mut().enumerate() {
        if state.m[i].len() != value.numel() {
            return Err(Error::Shape(format!(
                "optimizer state tensor {i} has {} elements, parameter has {}",
                state.m[i].len(),
                value.numel()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, (p, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = Scalar::to_f64(*g);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let next = Scalar::to_f64(*p) - lr * m_hat / (v_hat.sqrt() + eps);
            *p = T::from_f64(next);
        }
    }
    Ok(())
}
