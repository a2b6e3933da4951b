//! Optimizers over a [`ParamStore`]. Each optimizer only touches the
//! parameter ids it was built with, so the discriminator and generator
//! groups of a single store can be stepped independently.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    params: Vec<ParamId>,
    m: HashMap<ParamId, Tensor<T>>,
    v: HashMap<ParamId, Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: Vec<ParamId>) -> Self {
        Adam {
            cfg,
            params,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<ParamId, Tensor<T>>) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = T::from_f64c(self.cfg.lr);
        let eps = T::from_f64c(self.cfg.eps);
        let (b1t, b2t) = (T::from_f64c(b1), T::from_f64c(b2));
        let (c1t, c2t) = (T::from_f64c(c1), T::from_f64c(c2));
        for &id in &self.params {
            let Some(g) = grads.get(&id) else { continue };
            let p = store.get_mut(id);
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1t * *mv + (T::one() - b1t) * gv;
                *vv = b2t * *vv + (T::one() - b2t) * gv * gv;
                let mhat = *mv / c1t;
                let vhat = *vv / c2t;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// SGD with Nesterov momentum (PyTorch formulation) and optional global
/// gradient-norm clipping.
pub struct NesterovSgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    params: Vec<ParamId>,
    velocity: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> NesterovSgd<T> {
    pub fn new(params: Vec<ParamId>, momentum: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        NesterovSgd {
            momentum,
            weight_decay,
            clip_norm,
            params,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<ParamId, Tensor<T>>, lr: f64) {
        let norm: f64 = self
            .params
            .iter()
            .filter_map(|id| grads.get(id))
            .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        let mu = T::from_f64c(self.momentum);
        let wd = T::from_f64c(self.weight_decay);
        let lr = T::from_f64c(lr);
        let scale = T::from_f64c(scale);
        for &id in &self.params {
            let Some(g) = grads.get(&id) else { continue };
            let p = store.get_mut(id);
            let vel = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                let d = gv * scale + wd * *pv;
                *vv = mu * *vv + d;
                *pv = *pv - lr * (d + mu * *vv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, vec![p]);
        let grads = HashMap::from([(p, Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())]);
        opt.step(&mut store, &grads);
        let v = store.get(p).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn nesterov_matches_hand_computation() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = NesterovSgd::new(vec![p], 0.9, 0.0, None);
        let grads = HashMap::from([(p, Tensor::new(vec![1], vec![2.0]).unwrap())]);
        opt.step(&mut store, &grads, 0.1);
        // v = 2, p = 1 - 0.1 * (2 + 0.9 * 2)
        assert!((store.get(p).data()[0] - (1.0 - 0.38)).abs() < 1e-12);
        opt.step(&mut store, &grads, 0.1);
        // v = 0.9*2 + 2 = 3.8, step = 0.1 * (2 + 0.9*3.8)
        assert!((store.get(p).data()[0] - (0.62 - 0.542)).abs() < 1e-12);
    }
}
