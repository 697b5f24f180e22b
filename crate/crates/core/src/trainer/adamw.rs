//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First and second moments for every trainable parameter, in store order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let moments = params
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(_, name, t)| Moments {
                name: name.to_string(),
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
            })
            .collect();
        Self { t: 0, moments }
    }

    /// Checks that the moments line up with the trainable parameters.
    pub fn matches<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let trainable: Vec<_> = params.iter().filter(|(_, _, t)| t.requires_grad()).collect();
        if trainable.len() != self.moments.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state covers {} tensors, model has {} trainable",
                self.moments.len(),
                trainable.len()
            )));
        }
        for ((_, name, t), m) in trainable.iter().zip(&self.moments) {
            if *name != m.name || t.len() != m.m.len() || t.len() != m.v.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for `{}` do not match parameter `{name}`",
                    m.name
                )));
            }
        }
        Ok(())
    }
}

/// One update over every trainable parameter. Missing gradients count as
/// zero. Nothing is modified if any gradient is non-finite.
pub fn adamw_step<T: Real>(params: &mut ParamStore<T>, state: &mut OptimizerState, cfg: &AdamWConfig) -> Result<()> {
    state.matches(params)?;
    for (_, name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let ids: Vec<_> = params.ids().filter(|&id| params.get(id).requires_grad()).collect();
    for (id, mom) in ids.into_iter().zip(state.moments.iter_mut()) {
        let tensor = params.get_mut(id);
        let grad = tensor.grad().map(<[T]>::to_vec);
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
            let m = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
            mom.m[i] = m;
            mom.v[i] = v;
            let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            *p = T::lit(p.as_f64() * decay - cfg.lr * update);
        }
    }
    Ok(())
}

/// Scales every gradient so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            if let Some(g) = t.grad().map(|g| g.iter().map(|&x| x * s).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}
