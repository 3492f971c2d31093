use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily to match
/// the store they are first applied to.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn ensure_state(&mut self, store: &ParamStore<T>) {
        if self.m.len() != store.len() {
            self.m = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
            self.v = self.m.clone();
        }
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient list does not match store");
        self.ensure_state(store);
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(eps);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if !store.entries()[i].trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(crate::params::ParamId(i));
            for (((pv, mv), vv), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *mv = b1 * *mv + one_b1 * g;
                *vv = b2 * *vv + one_b2 * g * g;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moment buffers as `(m, v)` pairs, for checkpointing.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Moments materialized for `store` (zeros before the first step).
    pub fn moments_for(&mut self, store: &ParamStore<T>) -> (&[Tensor<T>], &[Tensor<T>]) {
        self.ensure_state(store);
        (&self.m, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[Some(Tensor::new(&[2], vec![0.5, -3.0]))], 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn buffers_and_missing_grads_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::ones(&[3]));
        let b = store.add_buffer("b", Tensor::ones(&[3]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[None, Some(Tensor::ones(&[3]))], 0.1);
        assert_eq!(store.get(a).data(), &[1.0; 3]);
        assert_eq!(store.get(b).data(), &[1.0; 3]);
    }
}
