use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

/// Moment estimates, keyed like the parameters they track.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape().to_vec()));
            }
            s
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self) -> &ParamStore<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamStore<T> {
        &self.v
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
) -> Result<(), TrainError> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() || state.m.get(name).map(Tensor::shape) != Some(p.shape()) {
            return Err(TrainError::Invalid(format!(
                "shape mismatch for `{name}`: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let (step_size, eps, c2) = (T::of(lr / c1), T::of(eps), T::of(c2));

    let mut updated = Vec::with_capacity(grads.len());
    for (name, g) in grads.iter() {
        let p = params.get(name).expect("checked above");
        let m_old = state.m.get(name).expect("checked above");
        let v_old = state.v.get(name).expect("checked above");
        let n = p.numel();
        let (mut m, mut v, mut w) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i];
            let mi = b1 * m_old.data()[i] + one_b1 * gi;
            let vi = b2 * v_old.data()[i] + one_b2 * gi * gi;
            w.push(p.data()[i] - step_size * mi / ((vi / c2).sqrt() + eps));
            m.push(mi);
            v.push(vi);
        }
        let shape = p.shape().to_vec();
        updated.push((
            name.to_string(),
            Tensor::new(shape.clone(), w)?,
            Tensor::new(shape.clone(), m)?,
            Tensor::new(shape, v)?,
        ));
    }
    for (name, w, m, v) in updated {
        params.insert(name.clone(), w);
        state.m.insert(name.clone(), m);
        state.v.insert(name, v);
    }
    Ok(())
}
