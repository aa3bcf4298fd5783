use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Real;

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter and the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

fn update<T: Real>(theta: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        if params.get(name)?.numel() != g.len() {
            return Err(Error::shape("adam gradient", params.get(name)?.shape(), &[g.len()]));
        }
    }
    state.step += 1;
    for (name, g) in grads {
        let theta = params.get_mut(name)?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
        update(theta.data_mut(), g, m, v, state.step, cfg);
    }
    Ok(())
}

/// Adam on a bare vector, for callers outside the model.
pub fn adam_update_slice<T: Real>(theta: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) -> Result<()> {
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient("<slice>".into()));
    }
    if step == 0 {
        return Err(Error::Contract("Adam steps are counted from 1".into()));
    }
    update(theta, g, m, v, step, cfg);
    Ok(())
}
