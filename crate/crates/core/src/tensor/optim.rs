use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Bias-corrected Adam moments for every parameter in a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Parameters absent
    /// from `grads` keep their values and moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "{}: param {:?} vs grad {:?}",
                        store.name(id),
                        store.get(id).shape(),
                        g.shape()
                    ),
                ));
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros_like(g));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros_like(g));
            let p = store.get_mut(id);
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn one_param(v: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::row(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = one_param(vec![1.0, -2.0]);
        let mut g = Gradients::default();
        g.insert(id, Tensor::row(vec![0.0, 0.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = one_param(vec![0.0, 0.0, 0.0]);
        let mut g = Gradients::default();
        g.insert(id, Tensor::row(vec![0.5, -3.0, 1e-3]));
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg);
        adam.step(&mut s, &g).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g|+eps).
        for (p, gi) in s.get(id).data().iter().zip([0.5f64, -3.0, 1e-3]) {
            let expect = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, id) = one_param(vec![0.0, 0.0]);
        let mut g = Gradients::default();
        g.insert(id, Tensor::row(vec![1.0, 2.0, 3.0]));
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut s, &g).is_err());
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut s, id) = one_param(vec![0.3, -0.7]);
            let mut adam = Adam::new(AdamConfig::default());
            for k in 0..50 {
                let mut g = Gradients::default();
                let p = s.get(id).data().to_vec();
                g.insert(id, Tensor::row(vec![2.0 * p[0] + k as f64 * 1e-3, p[1].sin()]));
                adam.step(&mut s, &g).unwrap();
            }
            s.get(id).clone()
        };
        assert_eq!(run(), run());
    }
}
