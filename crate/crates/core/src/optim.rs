//! Adaptive-moment optimizer with decoupled weight decay.

use alloc::vec::Vec;

use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
}

impl AdamW {
    /// Weight decay applies to matrices only; vectors, scalars and
    /// normalization gains are left undecayed.
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            step: 0,
            m: store.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            decay: store.values().iter().map(|t| t.rank() >= 2).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let p = store.get_mut(id);
            let wd = if self.decay[i] { weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gx), mx), vx) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *x -= lr * wd * *x;
                *mx = beta1 * *mx + (1.0 - beta1) * gx;
                *vx = beta2 * *vx + (1.0 - beta2) * gx * gx;
                let mhat = *mx / bc1;
                let vhat = *vx / bc2;
                *x -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let g = Tensor::new(&[2], alloc::vec![0.3, -2.0]).unwrap();
        opt.step(&mut store, &[Some(g)], 0.1);
        let w = store.values()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[&[3.0, -2.0]]).unwrap());
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let g = store.get(id).map(|x| 2.0 * x);
            opt.step(&mut store, &[Some(g)], 0.01);
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }
}
