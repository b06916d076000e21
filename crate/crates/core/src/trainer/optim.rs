use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay over a fixed set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub ids: Vec<ParamId>,
    pub weight_decay: f64,
    /// Completed updates, for bias correction.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Scalar part of [`Adam`] that goes into a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub params: Vec<String>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, weight_decay: f64) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        let m = ids.iter().map(zeros).collect();
        let v = ids.iter().map(zeros).collect();
        Self { ids, weight_decay, t: 0, m, v }
    }

    /// One update with step size `lr`. Parameters of the group that have no
    /// entry in `grads` still decay, matching a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powf(self.t as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(self.t as f64);
        for ((id, m), v) in self.ids.iter().zip(&mut self.m).zip(&mut self.v) {
            let p = store.get_mut(*id);
            let g = grads.get(*id);
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
    }

    pub fn state(&self, store: &ParamStore) -> AdamState {
        AdamState { params: self.ids.iter().map(|id| store.name(*id).to_string()).collect(), t: self.t }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn quadratic(store: &ParamStore, id: ParamId) -> Gradients {
        let mut g = Graph::new();
        let p = g.param(store, id);
        let sq = g.square(p).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![1.0, -2.0]));
        let mut adam = Adam::new(&store, vec![id], 0.0);
        let grads = quadratic(&store, id);
        adam.step(&mut store, &grads, 0.1);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![3.0, -1.0, 0.5]));
        let mut adam = Adam::new(&store, vec![id], 0.0);
        for _ in 0..2000 {
            let grads = quadratic(&store, id);
            adam.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn decoupled_weight_decay_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![2.0]));
        let mut adam = Adam::new(&store, vec![id], 0.5);
        adam.step(&mut store, &Gradients::default(), 0.1);
        assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![0.123456789, -7.5]));
        let before = store.clone();
        let mut adam = Adam::new(&store, vec![id], 1e-4);
        let grads = quadratic(&store, id);
        adam.step(&mut store, &grads, 0.0);
        assert_eq!(store, before);
    }
}
