//! Adam with decoupled weight decay.

use crate::nn::{ParamId, ParamStore, StepGrads};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            state: vec![None; store.len()],
        }
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient in `grads` are left untouched, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &StepGrads, lr: f64) {
        let c = &self.config;
        for (id, g) in &grads.grads {
            if !store.entry(*id).trainable {
                continue;
            }
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            let w = store.value_mut(*id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                w[i] -= lr * c.weight_decay * w[i];
                w[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        for (id, value) in &grads.buffer_updates {
            apply_buffer(store, *id, value);
        }
    }
}

fn apply_buffer(store: &mut ParamStore, id: ParamId, value: &Tensor) {
    *store.value_mut(id) = value.clone();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, ParamGroup};

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), ParamGroup::Head);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..300 {
            let mut g = Graph::new(&store, true);
            let v = g.param(p);
            let sq = g.tape.square(v);
            let loss = g.tape.sum(sq);
            let grads = g.finish(loss).unwrap();
            opt.step(&mut store, &grads, 0.1);
        }
        assert!(store.get(p).norm() < 1e-2);
    }

    #[test]
    fn untouched_without_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.5), ParamGroup::Head);
        let q = store.add("q", Tensor::scalar(1.5), ParamGroup::Head);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut g = Graph::new(&store, true);
        let v = g.param(p);
        let _ = g.param(q);
        let loss = g.tape.sum(v);
        let grads = g.finish(loss).unwrap();
        opt.step(&mut store, &grads, 1e-3);
        assert_ne!(store.get(p).item(), 1.5);
        assert_eq!(store.get(q).item().to_bits(), 1.5f64.to_bits());
    }
}
