use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-β DDPM schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 || !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs T ≥ 2 and 0 < β_min ≤ β_max < 1 (T={t_max}, β=[{beta_min}, {beta_max}])"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (t_max - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε`.
pub fn forward_noise(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?} vs {:?}", z0.shape(), eps.shape()),
        ));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}
