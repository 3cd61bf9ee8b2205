use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, NetworkParams};

/// Running average of squared gradients, one buffer per learnable tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub mean_square: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            mean_square: params.learnable().iter().map(|t| vec![0.0; t.data.len()]).collect(),
            step: 0,
        }
    }
}

/// `v ← ρ·v + (1−ρ)·g²`, `p ← p − lr·g / (√v + ε)`, element-wise.
pub fn rmsprop_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, rho: f64, eps: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = rho * *v + (1.0 - rho) * g * g;
        let denom = v.sqrt() + eps;
        if denom > 0.0 {
            *p -= lr * g / denom;
        }
    }
}

/// One optimizer step over every learnable tensor. Nothing is modified when
/// a gradient is non-finite.
pub fn rmsprop_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if let Some(bad) = grad_tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    let mut slots = params.learnable_mut();
    if slots.len() != grad_tensors.len() || slots.len() != state.mean_square.len() {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    for ((slot, g), v) in slots.iter_mut().zip(&grad_tensors).zip(&mut state.mean_square) {
        if slot.data.len() != g.data.len() || slot.data.len() != v.len() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", slot.name)));
        }
        rmsprop_update(slot.data, g.data, v, lr, rho, eps);
    }
    state.step += 1;
    Ok(())
}
