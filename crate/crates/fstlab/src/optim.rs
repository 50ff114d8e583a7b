//! SGD with momentum, and sharpness-aware minimization on top of it.

use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelSplit, ParamKey};
use crate::tensor::Tensor;

/// Momentum buffers aligned with a model's parameter registry.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(model: &ModelSplit, learning_rate: f64, momentum: f64) -> Result<OptimizerState> {
        if !(learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// One momentum step over every parameter:
/// v <- momentum * v + g; p <- p - learningRate * v.
pub fn sgd_step(model: &mut ModelSplit, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    sgd_step_where(model, grads, state, |_| true)
}

/// Momentum step restricted to parameters where `trainable` returns true.
/// Frozen parameters and their velocity buffers are untouched, so freezing
/// is bit-exact rather than a zeroed-gradient approximation.
pub fn sgd_step_where(
    model: &mut ModelSplit,
    grads: &GradientSet,
    state: &mut OptimizerState,
    trainable: impl Fn(ParamKey) -> bool,
) -> Result<()> {
    if !grads.aligned_with(model) {
        return Err(Error::config("gradient set is not aligned with the model registry"));
    }
    if state.velocity.len() != model.params().len() {
        return Err(Error::config("optimizer state is not aligned with the model registry"));
    }
    let keys: Vec<ParamKey> = model.registry().to_vec();
    for (i, key) in keys.iter().enumerate() {
        if !trainable(*key) {
            continue;
        }
        let v = &mut state.velocity[i];
        v.scale(state.momentum);
        v.axpy(1.0, &grads.grads()[i]);
        model.params_mut()[i].axpy(-state.learning_rate, v);
    }
    Ok(())
}

/// Sharpness-aware step: perturb parameters by `rho` along the normalized
/// gradient (global L2 norm across all tensors), recompute gradients at the
/// perturbed point, restore the original parameters exactly, then apply a
/// momentum step with the perturbed gradients.
///
/// Returns the loss at the unperturbed point. A zero gradient norm falls
/// back to a plain momentum step.
pub fn sam_step(
    model: &mut ModelSplit,
    batch: &Tensor,
    labels: &[usize],
    rho: f64,
    state: &mut OptimizerState,
) -> Result<f64> {
    if rho < 0.0 {
        return Err(Error::config(format!("sam rho must be >= 0, got {rho}")));
    }
    let (loss, grads) = model.backward(batch, labels, None)?;
    let norm = grads.global_norm();
    if norm == 0.0 {
        sgd_step(model, &grads, state)?;
        return Ok(loss);
    }

    let saved: Vec<Tensor> = model.params().to_vec();
    let scale = rho / norm;
    for (p, g) in model.params_mut().iter_mut().zip(grads.grads()) {
        p.axpy(scale, g);
    }
    let ascent = model.backward(batch, labels, None);
    // Restore before surfacing any error so the model is never left perturbed.
    for (p, s) in model.params_mut().iter_mut().zip(saved) {
        *p = s;
    }
    let (_, perturbed_grads) = ascent?;
    sgd_step(model, &perturbed_grads, state)?;
    Ok(loss)
}
