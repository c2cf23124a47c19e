use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, ModelParams, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, aligned with the parameter order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some(path) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of `{path}` at Adam step {}", state.step + 1)));
    }
    if state.m.len() != params.len() {
        return Err(Error::invalid("adam_step", "optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() / (T::one() - T::lit(cfg.beta1.powi(t)));
    let c2 = T::one() / (T::one() - T::lit(cfg.beta2.powi(t)));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (i, (path, p)) in params.iter_mut().enumerate() {
        let g = grads.get(path).ok_or_else(|| Error::Param { path: path.into(), msg: "no gradient".into() })?;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            *w -= lr * (m[j] * c1) / ((v[j] * c2).sqrt() + eps);
        }
    }
    Ok(())
}
