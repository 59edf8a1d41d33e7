//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers per parameter name plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One update of every parameter that has a gradient in `grads`.
///
/// The whole step is rejected, and `t` left unchanged, if any gradient is
/// non-finite or mismatched in shape.
pub fn adam_step<T: Element>(params: &mut ParamStore<T>, grads: &ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("`{name}`: parameter {} vs gradient {}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let (bc1, bc2, lr, eps) = (T::from_f64(bc1), T::from_f64(bc2), T::from_f64(lr), T::from_f64(eps));
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
