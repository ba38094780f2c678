use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{usage_err, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with their gradients and Adam moment buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.numel();
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(vec![0.0; n]);
        self.first_moment.push(vec![0.0; n]);
        self.second_moment.push(vec![0.0; n]);
        ParamId(self.values.len() - 1)
    }

    /// Adds a parameter drawn from `N(0, std^2)`.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> ParamId {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data).expect("consistent shape"))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![value; numel]).expect("consistent shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.first_moment[id.0], &self.second_moment[id.0])
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        let n = self.values[id.0].numel();
        if m.len() != n || v.len() != n {
            return usage_err(format!("moment buffers for {} have wrong size", self.names[id.0]));
        }
        self.first_moment[id.0] = m;
        self.second_moment[id.0] = v;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        for (g, d) in self.grads[id.0].iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update over every parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in 0..self.values.len() {
            let value = self.values[p].data_mut();
            let grad = &self.grads[p];
            let m = &mut self.first_moment[p];
            let v = &mut self.second_moment[p];
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        store.accumulate_grad(id, &[grad]);
        (store, id)
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig::default();
        for g in [0.5, -3.0, 0.05] {
            let (mut store, id) = single(1.0, g);
            store.adam_step(&cfg);
            let delta = store.value(id).data()[0] - 1.0;
            assert_eq!(delta.signum(), -g.signum());
            assert!((delta.abs() - cfg.lr).abs() < 1e-9, "delta {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = single(0.7, 0.0);
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.value(id).data()[0], 0.7);
    }

    #[test]
    fn second_identical_step_is_not_larger() {
        let cfg = AdamConfig::default();
        let (mut store, id) = single(1.0, 0.25);
        store.adam_step(&cfg);
        let after_one = store.value(id).data()[0];
        let first = (after_one - 1.0).abs();
        store.adam_step(&cfg);
        let second = (store.value(id).data()[0] - after_one).abs();
        assert!(second <= first + 1e-15, "{second} > {first}");

        // Closed-form trace: with a constant gradient both bias-corrected
        // moments equal g and g^2 exactly, so each step is lr*|g|/(|g|+eps).
        let expected = cfg.lr * 0.25 / (0.25 + cfg.eps);
        assert!((second - expected).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(vec![2]));
        store.accumulate_grad(a, &[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
