//! Optimizers and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::graph::Arr;
use super::params::ParamSet;

/// lr(epoch) = 0.5·lr0·(1 + cos(π·epoch/total)); lr(0) = lr0, lr(total) = 0.
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    0.5 * lr0 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

/// SGD with momentum and decoupled-into-gradient L2 weight decay.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Arr>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Arr>) {
        for (name, grad) in grads {
            let p = params.param_mut(name);
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g.zip_mut_with(p, |gi, &pi| *gi += self.weight_decay * pi);
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(p.raw_dim()));
            v.zip_mut_with(&g, |vi, &gi| *vi = self.momentum * *vi + gi);
            p.zip_mut_with(v, |pi, &vi| *pi -= self.lr * vi);
        }
    }
}

/// Adam with optional multiplicative per-step learning-rate decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// lr is multiplied by this factor after every call to `step`.
    pub lr_decay: f64,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64, lr_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Arr>) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params.param_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(p.raw_dim()));
            m.zip_mut_with(grad, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(grad, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / b1c;
                let vhat = vi / b2c;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        self.lr *= self.lr_decay;
    }
}
