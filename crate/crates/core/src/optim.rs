//! AdamW with per-group learning rates and an exponential schedule.

use serde::{Deserialize, Serialize};

use crate::nn::{Group, ParamGrads, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. `lr`
    /// returns the current learning rate of a group.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: impl Fn(Group) -> f64) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.group)).collect();
        for (id, group) in ids {
            let Some(g) = grads.get(id) else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let rate = lr(group);
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let step_size = T::lit(rate / bc1);
            let decay = T::lit(1.0 - rate * self.weight_decay);
            let inv_bc2 = T::lit(1.0 / bc2);
            let eps = T::lit(self.eps);
            let w = store.value_mut(id).data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w * decay - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// `lr(epoch) = base * gamma^epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialLr {
    pub base: f64,
    pub gamma: f64,
}

impl ExponentialLr {
    pub fn at(&self, epoch: usize) -> f64 {
        self.base * self.gamma.powi(epoch as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Kind, Linear, seeded_rng};

    #[test]
    fn schedule_decays_geometrically() {
        let s = ExponentialLr { base: 1e-3, gamma: 0.9 };
        assert_eq!(s.at(0), 1e-3);
        assert!((s.at(3) - 1e-3 * 0.729).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap(), Group::Language, Kind::Weight);
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let mut g = Graph::new(&mut store, true, 0);
            let x = g.param(id);
            let sq = g.tape.mul(x, x).unwrap();
            let loss = g.tape.sum(sq);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut store, &grads, |_| 0.05);
        }
        assert!(store.value(id).max_abs() < 1e-2);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::<f32>::new();
        let a = Linear::new(&mut store, "a", 2, 2, true, Group::VisionHead, &mut rng);
        let b = Linear::new(&mut store, "b", 2, 1, true, Group::Language, &mut rng);
        store.set_trainable(Group::VisionHead, false);
        let before = store.checksum(&[Group::VisionHead]);
        let mut opt = AdamW::new(1e-2);
        let mut g = Graph::new(&mut store, true, 0);
        let x = g.input(Tensor::ones(&[3, 2]));
        let h = a.forward(&mut g, x).unwrap();
        let y = b.forward(&mut g, h).unwrap();
        let loss = g.tape.sum(y);
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &grads, |_| 1e-3);
        assert_eq!(store.checksum(&[Group::VisionHead]), before);
    }
}
