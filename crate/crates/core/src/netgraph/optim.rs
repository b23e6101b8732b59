use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DenoiserParams, Gradients};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

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

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &DenoiserParams<T>, config: AdamConfig) -> Self {
        let zeros: BTreeMap<_, _> = params
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// All gradients are checked before anything is modified.
pub fn optimizer_step<T: Scalar>(
    params: &mut DenoiserParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter `{name}`")))?;
        p.expect_shape(g.shape())?;
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                path: name.clone(),
                reason: format!("gradient element {i} is {}", g.data()[i]),
            });
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - beta1.powi(t));
    let bc2 = T::of(1.0 - beta2.powi(t));
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (lr, eps) = (T::of(lr), T::of(eps));
    for (name, g) in grads {
        let m = state.m.get_mut(name).expect("moment exists");
        let v = state.v.get_mut(name).expect("moment exists");
        let p = params.tensors_mut().get_mut(name).expect("checked above");
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
