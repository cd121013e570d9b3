use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::params::{ParamId, ParamStore};

/// AdamW hyperparameters. Defaults are the published full-scale settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub epoch_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 0.01,
            eps: 1e-9,
            epoch_decay: libm::pow(0.999, 1.0 / 8.0),
        }
    }
}

impl AdamWConfig {
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.lr * libm::pow(self.epoch_decay, epoch as f64)
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Adam with decoupled weight decay.
///
/// Each parameter keeps its own step count, so parameters updated on
/// different schedules (generator vs discriminator) get correct bias
/// correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    epoch: u64,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            epoch: 0,
            state: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at_epoch(self.epoch)
    }

    /// Updates every parameter in `ids` that carries a gradient.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        let lr = self.lr();
        let c = self.config;
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), Moments::default);
        }
        for &id in ids {
            let st = &mut self.state[id.index()];
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if st.m.is_empty() {
                st.m = vec![0.0; grad.len()];
                st.v = vec![0.0; grad.len()];
            }
            st.steps += 1;
            let bc1 = 1.0 - libm::pow(c.beta1, st.steps as f64);
            let bc2 = 1.0 - libm::pow(c.beta2, st.steps as f64);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                st.m[k] = c.beta1 * st.m[k] + (1.0 - c.beta1) * g;
                st.v[k] = c.beta2 * st.v[k] + (1.0 - c.beta2) * g * g;
                let m_hat = st.m[k] / bc1;
                let v_hat = st.v[k] / bc2;
                *p *= 1.0 - lr * c.weight_decay;
                *p -= lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
    }
}
