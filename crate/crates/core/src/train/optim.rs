use std::collections::BTreeMap;

use mctseg_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// `initial_lr * (1 - epoch / max_epoch)^p`.
pub fn poly_lr(epoch: usize, initial_lr: f64, max_epoch: usize, p: f64) -> f64 {
    let frac = (epoch.min(max_epoch) as f64 / max_epoch.max(1) as f64).min(1.0);
    initial_lr * (1.0 - frac).powf(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moments and step count per parameter. Parameters that a
/// step does not touch keep their state (and value) unchanged.
#[derive(Clone, Debug, Default)]
pub struct OptimState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: BTreeMap<String, u64>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }
}

/// Bias-corrected Adam with L2-coupled weight decay, applied to every
/// parameter that has an entry in `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for (key, g) in grads {
        let p = params
            .get_mut(key)
            .ok_or_else(|| Error::KeySetMismatch(format!("gradient for unknown parameter {key}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{key}: gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let t = state.t.entry(key.clone()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
        for (((theta, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let th = theta.to_f64();
            let gi = gi.to_f64() + cfg.weight_decay * th;
            let mn = cfg.beta1 * mi.to_f64() + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * vi.to_f64() + (1.0 - cfg.beta2) * gi * gi;
            *mi = T::from_f64(mn);
            *vi = T::from_f64(vn);
            let m_hat = mn / bc1;
            let v_hat = vn / bc2;
            *theta = T::from_f64(th - lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
