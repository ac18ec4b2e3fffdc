//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Zero-initialized first/second moments for a fixed parameter ordering.
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> AdamState<T> {
        AdamState {
            config,
            step_count: 0,
            moments: params
                .iter()
                .map(|p| (vec![T::ZERO; p.numel()], vec![T::ZERO; p.numel()]))
                .collect(),
        }
    }
}

/// One Adam update. Returns fresh parameter leaves in the same order;
/// increments `step_count` by exactly 1.
pub fn adam_step<T: Scalar>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<Vec<Tensor<T>>> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let cfg = state.config;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.eps);
    let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));

    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = &mut state.moments[i];
        let mut new_data = p.data().to_vec();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = b1 * m[j] + (T::ONE - b1) * gj;
            v[j] = b2 * v[j] + (T::ONE - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            new_data[j] = new_data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        out.push(Tensor::from_vec(p.shape(), new_data)?.requires_grad());
    }
    Ok(out)
}
