//! Adam over a fixed group of parameters.

use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one parameter group. Each parameter keeps its own step
/// count, so a parameter that gets no gradient in a step is left untouched.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    steps: Vec<u64>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let m: Vec<Tensor<T>> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self { config, steps: vec![0; ids.len()], v: m.clone(), m, ids }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let step_size = T::from_f64(learning_rate / bc1);
            let bc2_sqrt = T::from_f64(bc2.sqrt());
            let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
            let (c1, c2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
            let eps = T::from_f64(eps);
            let p = store.get_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + c1 * gv;
                *vv = b2 * *vv + c2 * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// `(step count, first moment, second moment)` per parameter, in group order.
    pub fn state(&self) -> impl Iterator<Item = (ParamId, u64, &Tensor<T>, &Tensor<T>)> {
        self.ids.iter().enumerate().map(|(k, &id)| (id, self.steps[k], &self.m[k], &self.v[k]))
    }

    /// Restore the state of parameter `k` of the group.
    pub fn set_state(&mut self, k: usize, steps: u64, m: Tensor<T>, v: Tensor<T>) {
        self.steps[k] = steps;
        self.m[k] = m;
        self.v[k] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;

    #[test]
    fn first_step_moves_each_weight_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &store, vec![id]);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        let l = tape.mean(sq);
        let g = tape.backward(l);
        opt.step(&mut store, &g);
        // bias-corrected first step is lr·sign(g)
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[1], vec![3.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.05, beta1: 0.9, ..Default::default() }, &store, vec![id]);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let sq = tape.mul(w, w).unwrap();
            let l = tape.mean(sq);
            let g = tape.backward(l);
            opt.step(&mut store, &g);
        }
        assert!(store.get(id).item().abs() < 1e-2);
    }
}
