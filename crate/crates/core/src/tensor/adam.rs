use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Element, ParamStore, Tensor};
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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: IndexMap<String, Vec<T>>,
    second: IndexMap<String, Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// Parameters without an entry in `grads` are treated as having a zero
/// gradient. Gradients are screened for non-finite values before anything is
/// modified, so an abort leaves both `params` and `state` untouched.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let cfg = state.config;
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", cfg.lr)));
    }
    for (name, g) in grads {
        let Some(p) = params.get(name) else {
            return Err(Error::Config(format!("gradient for unknown parameter `{name}`")));
        };
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in `{name}` at element {pos} ({})",
                g.data()[pos]
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step_size = T::from_f64(cfg.lr / bias1);
    let bias2_sqrt = T::from_f64(bias2.sqrt());
    let eps = T::from_f64(cfg.eps);

    for (name, p) in params.iter_mut() {
        let n = p.numel();
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let g = grads.get(name).map(Tensor::data);
        let data = p.data_mut();
        for i in 0..n {
            let gi = g.map_or(T::zero(), |g| g[i]);
            m[i] = b1t * m[i] + one_m_b1 * gi;
            v[i] = b2t * v[i] + one_m_b2 * gi * gi;
            let denom = v[i].sqrt() / bias2_sqrt + eps;
            data[i] = data[i] - step_size * m[i] / denom;
        }
    }
    Ok(())
}
