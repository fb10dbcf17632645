//! AdamW with linear warmup, and EMA shadow weights.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{DenoiserParams, ParamSpec};
use crate::numkit::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 200,
        }
    }
}

impl AdamConfig {
    /// `lr * min(1, step / warmup_steps)`.
    pub fn effective_lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(tensors: &[Tensor<T>]) -> Self {
        let z: Vec<Tensor<T>> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// One AdamW update over named tensors. Decay is applied only where
/// `decays[i]`; bias-corrected moments use the 1-based `step`.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_update<T: Scalar>(
    tensors: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    names: &[&str],
    decays: &[bool],
    step: usize,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if step == 0 {
        return Err(TrainError::Config("optimizer step counts from 1".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != tensors[i].shape() {
            return Err(TrainError::Config(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                names[i],
                g.shape(),
                tensors[i].shape()
            )));
        }
        if !g.is_finite() {
            let max_abs = g
                .data()
                .iter()
                .map(|x| x.to_f64_lossy().abs())
                .fold(0.0, |m: f64, x| if x.is_nan() || x > m { x } else { m });
            return Err(TrainError::NonFiniteGradient {
                name: names[i].to_string(),
                max_abs,
            });
        }
    }
    let lr = cfg.effective_lr(step);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1);
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2);
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::from_f64_lossy(cfg.eps);
    let lr_t = T::from_f64_lossy(lr);
    for (i, g) in grads.iter().enumerate() {
        let shrink = if decays[i] {
            T::from_f64_lossy(1.0 - lr * cfg.weight_decay)
        } else {
            T::one()
        };
        let p = tensors[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] = p[j] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// [`adamw_update`] over a full parameter set, decaying per [`ParamSpec`].
pub fn adamw_step<T: Scalar>(
    params: &mut DenoiserParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    step: usize,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    let specs: Vec<ParamSpec> = params.specs().to_vec();
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    let decays: Vec<bool> = specs.iter().map(|s| s.kind.decays()).collect();
    if grads.len() != specs.len() {
        return Err(TrainError::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            specs.len()
        )));
    }
    adamw_update(params.tensors_mut(), grads, state, &names, &decays, step, cfg)?;
    if !params.all_finite() {
        return Err(TrainError::Numeric("parameters became non-finite".into()));
    }
    Ok(())
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(shadow: &mut [Tensor<T>], params: &[Tensor<T>], decay: f64) {
    let d = T::from_f64_lossy(decay);
    let c = T::from_f64_lossy(1.0 - decay);
    for (s, p) in shadow.iter_mut().zip(params) {
        for (x, &y) in s.data_mut().iter_mut().zip(p.data()) {
            *x = d * *x + c * y;
        }
    }
}
