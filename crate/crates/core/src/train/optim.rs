//! Adam with decoupled weight decay on convolution and linear kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnUpdate, Gradients, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamHyper) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn check_matches(&self, store: &ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Version("optimizer state does not match the parameter table".into()));
        }
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Version(format!("optimizer state shape mismatch for {}", p.name)));
            }
        }
        Ok(())
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - h.beta1.powi(t));
        let bc2 = T::lit(1.0 - h.beta2.powi(t));
        let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
        let (one, eps, lr_t) = (T::one(), T::lit(h.eps), T::lit(lr));
        let decay = T::lit(lr * h.weight_decay);
        for (idx, (id, param)) in store.iter_mut().enumerate() {
            if !param.kind.trainable() {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let decays = param.kind == ParamKind::Kernel && h.weight_decay > 0.0;
            let w = param.value.data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                if decays {
                    w[k] -= decay * w[k];
                }
                w[k] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Exponential moving average of batch-norm statistics: `r <- (1 - m) r + m b`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            let r = store.get_mut(id).value.data_mut();
            for (rv, &bv) in r.iter_mut().zip(batch) {
                *rv = keep * *rv + m * bv;
            }
        }
    }
}
