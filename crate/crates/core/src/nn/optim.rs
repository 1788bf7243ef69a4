//! Adam with decoupled weight decay and a per-epoch learning-rate multiplier.

use super::mat::Mat;
use super::params::{Grads, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    config: AdamConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    steps: u64,
    lr_multiplier: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| {
                    let m = params.get(id);
                    Mat::zeros(m.rows(), m.cols())
                })
                .collect::<Vec<_>>()
        };
        Self { config, first: zeros(), second: zeros(), steps: 0, lr_multiplier: 1.0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Learning rate currently applied (base rate times the schedule multiplier).
    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate * self.lr_multiplier
    }

    pub fn set_lr_multiplier(&mut self, m: f64) {
        self.lr_multiplier = m;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.steps += 1;
        let c = &self.config;
        let lr = self.config.learning_rate * self.lr_multiplier;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let before = store.get(id).clone();
        let mut grads = store.zero_grads();
        grads.accumulate(id, &Mat::from_vec(1, 3, vec![0.3, 0.1, -4.0]), 1.0);
        let mut adam = Adam::new(&store, AdamConfig { learning_rate: 0.0, ..AdamConfig::default() });
        adam.step(&mut store, &grads);
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Mat::from_vec(1, 2, vec![0.0, 0.0]));
        let mut grads = store.zero_grads();
        grads.accumulate(id, &Mat::from_vec(1, 2, vec![2.0, -0.5]), 1.0);
        let mut adam = Adam::new(&store, AdamConfig { learning_rate: 0.1, weight_decay: 0.0, ..AdamConfig::default() });
        adam.step(&mut store, &grads);
        let w = store.get(id).data();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6, "{w:?}");
    }
}
