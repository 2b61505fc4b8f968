use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First/second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let mut s = AdamState::default();
        for (name, p) in store.iter() {
            s.m.insert(name.to_string(), Tensor::zeros(p.value.shape()));
            s.v.insert(name.to_string(), Tensor::zeros(p.value.shape()));
        }
        s
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are zeroed afterwards.
///
/// A non-finite gradient aborts before any parameter moves.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in store.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "gradient of {name}[{i}] is {}",
                p.grad.data()[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for (name, p) in store.iter_mut() {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::dim(alloc::format!("optimizer moments for {name} do not match parameter shape")));
        }
        let (md, vd) = (m.data_mut(), v.data_mut());
        let g = p.grad.data();
        let x = p.value.data_mut();
        for i in 0..x.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            x[i] -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
        }
    }
    store.zero_grad();
    Ok(())
}
