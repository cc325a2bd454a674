//! AdamW with decoupled weight decay.

use crate::error::{Result, ScdError};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    /// Optimizer over every trainable entry of the store; frozen entries and
    /// buffers are never touched.
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let ids = store.ids_of_kind(ParamKind::Trainable);
        let m = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        let v = m.clone();
        Self { config, ids, m, v, step: 0 }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Scalar count of optimized values.
    pub fn param_count(&self, store: &ParamStore<T>) -> usize {
        self.ids.iter().map(|&id| store.get(id).len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters absent from `grads` (unused in the forward
    /// pass) only receive weight decay and moment decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let step_size = T::of(c.lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for (k, &id) in self.ids.iter().enumerate() {
            let zero;
            let g = match grads.param(id) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(store.get(id).shape());
                    &zero
                }
            };
            if !g.all_finite() {
                return Err(ScdError::NonFiniteLoss { component: "gradient", value: f64::NAN });
            }
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] = p[i] * decay - step_size * m[i] / ((v[i]).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Mode};

    #[test]
    fn minimizes_a_quadratic_and_skips_frozen() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Trainable, Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let f = store.add("f", ParamKind::Frozen, Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let mut opt = AdamW::new(&store, AdamWConfig { lr: 0.05, weight_decay: 0.0, ..AdamWConfig::default() });
        assert_eq!(opt.param_count(&store), 2);
        for _ in 0..500 {
            let grads = {
                let g = Graph::new(&store, Mode::Train);
                let d = g.sub(g.param(w), g.param(f));
                let loss = g.sum(g.square(d));
                g.backward(loss)
            };
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get(w).data().iter().all(|v| (v - 1.0).abs() < 1e-2), "{:?}", store.get(w));
        assert_eq!(store.get(f).data(), &[1.0, 1.0]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step with gradient g, the update is lr * sign(g)
        // (bias-corrected moments cancel) plus decoupled decay.
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Trainable, Tensor::new(&[1], vec![2.0]).unwrap());
        let cfg = AdamWConfig { lr: 0.1, eps: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&store, cfg);
        let grads = {
            let g = Graph::new(&store, Mode::Train);
            let loss = g.sum(g.scale(g.param(w), 3.0));
            g.backward(loss)
        };
        opt.step(&mut store, &grads).unwrap();
        let expected = 2.0 * (1.0 - 0.1 * 0.01) - 0.1;
        assert!((store.get(w).data()[0] - expected).abs() < 1e-12);
    }
}
