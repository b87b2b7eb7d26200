//! Adam with a step-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::params::{GradStore, ParamId, ParamKind, ParamStore};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate for a 0-indexed epoch: `base * factor^(epoch / every)`.
pub fn annealed_lr(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Mat> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Mat::zeros(r, c)
            })
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient still advance their
    /// moments with a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let id = ParamId(idx);
            if !store.is_trainable(id) {
                continue;
            }
            let padded = matches!(store.kind(id), ParamKind::PaddedEmbedding);
            let cols = store.value(id).cols;
            let g = grads.get(id);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.value_mut(id);
            for k in 0..p.data.len() {
                if padded && k < cols {
                    continue;
                }
                let gk = g.map_or(0.0, |g| g.data[k]);
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_epoch_schedule() {
        let lrs: Vec<f64> = (0..7).map(|e| annealed_lr(0.001, 0.8, 3, e)).collect();
        let expect = [0.001, 0.001, 0.001, 0.0008, 0.0008, 0.0008, 0.00064];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{lrs:?}");
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let w = store.register("w", 1, 2, ParamKind::Constant(1.0), 0);
        let mut g = GradStore::new();
        g.add(w, &Mat::row_vec(vec![3.0, -0.5]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.update(&mut store, &g, 0.1);
        let v = store.value(w);
        assert!((v.data[0] - 0.9).abs() < 1e-6);
        assert!((v.data[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn padding_row_stays_zero() {
        let mut store = ParamStore::new();
        let e = store.register("emb", 3, 2, ParamKind::PaddedEmbedding, 1);
        let mut g = GradStore::new();
        g.add(e, &Mat::filled(3, 2, 1.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.update(&mut store, &g, 0.5);
        assert!(store.value(e).row(0).iter().all(|v| *v == 0.0));
    }
}
