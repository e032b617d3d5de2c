use std::collections::BTreeMap;

use super::Hyper;
use crate::error::{Error, Result};
use crate::net::{Gradients, NetParams};
use crate::real::Real;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(h: &Hyper) -> Self {
        Self {
            lr: h.lr,
            beta1: h.adam_beta1,
            beta2: h.adam_beta2,
            eps: h.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, p: &mut NetParams<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (key, g) in grads {
            let t = p
                .params
                .get_mut(key)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {key}")))?;
            if t.data.len() != g.len() {
                return Err(Error::Shape(format!("gradient size mismatch for {key}")));
            }
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                t.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
