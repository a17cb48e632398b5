//! Adam with bias correction.

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |id| {
            let (r, c) = store.value(id).shape();
            Matrix::zeros(r, c)
        };
        Self {
            config,
            lr: config.lr,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients held in `store`. Frozen
    /// parameters keep their values and moments.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(crate::error::invalid("optimizer was built for a different store"));
        }
        for id in store.ids() {
            if !store.grad(id).all_finite() {
                return Err(Error::NonFinite { op: "adam gradient" });
            }
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let k = id.index();
            let g = store.grad(id).as_slice().to_vec();
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            let p = store.value_mut(id).as_mut_slice();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
