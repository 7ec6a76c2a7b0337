use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    params: Vec<ParamId>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let first: Vec<Vec<T>> = params.iter().map(|&id| vec![T::zero(); store.get(id).numel()]).collect();
        let second = first.clone();
        AdamState { step: 0, params, first, second }
    }

    /// Rebuilds state from stored moments (checkpoint loading).
    pub fn from_parts(step: u64, params: Vec<ParamId>, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<Self> {
        if first.len() != params.len() || second.len() != params.len() {
            return Err(Error::Config("adam moment count does not match parameter count".into()));
        }
        Ok(AdamState { step, params, first, second })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.first[index], &self.second[index])
    }
}

/// One bias-corrected Adam update over every parameter in `state`.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for &id in &state.params {
        if grads.param(id).is_none() {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (k, &id) in state.params.iter().enumerate() {
        let g = grads.param(id).expect("checked above").data();
        let theta = store.get(id);
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        let mut next = theta.to_vec();
        for i in 0..next.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            next[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = theta.shape().to_vec();
        store.set(id, Tensor::from_parts(shape, next))?;
    }
    Ok(())
}
