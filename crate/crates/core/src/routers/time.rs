use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LevelMode {
    #[default]
    Soft,
    Hard,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeRouterConfig {
    /// Sinusoidal time-embedding width.
    pub d_t: usize,
    pub d_k: usize,
    /// Guide width σ.
    pub sigma: f64,
    /// KL weight λ_T.
    pub lambda: f64,
    pub mode: LevelMode,
}

impl Default for TimeRouterConfig {
    fn default() -> Self {
        Self {
            d_t: 16,
            d_k: 16,
            sigma: 1.0,
            lambda: 0.1,
            mode: LevelMode::Soft,
        }
    }
}

impl TimeRouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_t < 4 || !self.d_t.is_multiple_of(2) || self.d_k == 0 {
            return Err(Error::Config("time router widths: d_t even and ≥ 4, d_k ≥ 1".into()));
        }
        if !(self.sigma > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("time router needs σ > 0 and λ_T ≥ 0".into()));
        }
        Ok(())
    }
}

/// Sinusoidal encoding `[sin(τ·ω_k) …, cos(τ·ω_k) …]` with ω_k geometric from 1 down to 10⁻⁴.
pub fn time_embedding(tau: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let freq = |k: usize| {
        if half == 1 {
            1.0
        } else {
            (-(1e4f64).ln() * k as f64 / (half - 1) as f64).exp()
        }
    };
    let mut out: Vec<f64> = (0..half).map(|k| (tau * freq(k)).sin()).collect();
    out.extend((0..half).map(|k| (tau * freq(k)).cos()));
    out
}

/// Target level distribution: Gaussian over guide levels 1..L centred at μ = L·τ/T.
pub fn guide_distribution(tau: f64, t_max: usize, levels: usize, sigma: f64) -> Vec<f64> {
    let mu = levels as f64 * tau / t_max as f64;
    let w: Vec<f64> = (1..=levels)
        .map(|l| (-(l as f64 - mu).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// KL(p ‖ q) = Σ p ln(p/q); zero entries of p contribute nothing.
pub fn kl_penalty(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_penalty", format!("{} vs {}", p.len(), q.len())));
    }
    if q.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid("kl_penalty", "guide distribution has a zero entry"));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// Batch-mean KL(softmax(logits) ‖ guide) on the tape; `guide` is B × L.
pub fn kl_penalty_batch(tape: &mut Tape, logits: Var, guide: &Tensor) -> Result<Var> {
    if guide.data().iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid("kl_penalty", "guide distribution has a zero entry"));
    }
    let b = tape.value(logits).rows();
    let logq = tape.constant(guide.map(f64::ln));
    let logp = tape.log_softmax_rows(logits)?;
    let p = tape.softmax_rows(logits)?;
    let diff = tape.sub(logp, logq)?;
    let prod = tape.mul(p, diff)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / b as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub enum LevelSelection {
    Soft(Vec<f64>),
    Level(usize),
}

/// soft → weights verbatim; hard → argmax (ties to the lowest level);
/// fixed → min(⌊L·τ/T⌋, L−1).
pub fn select_level(mode: LevelMode, p: &[f64], tau: usize, t_max: usize, levels: usize) -> LevelSelection {
    match mode {
        LevelMode::Soft => LevelSelection::Soft(p.to_vec()),
        LevelMode::Hard => {
            let mut best = 0;
            for (l, &x) in p.iter().enumerate() {
                if x > p[best] {
                    best = l;
                }
            }
            LevelSelection::Level(best)
        }
        LevelMode::Fixed => LevelSelection::Level(((levels * tau) / t_max).min(levels - 1)),
    }
}

#[derive(Clone, Debug)]
pub struct TimeRouter {
    pub config: TimeRouterConfig,
    pub levels: usize,
    pub phi: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
}

impl TimeRouter {
    pub fn init(
        config: TimeRouterConfig,
        levels: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        let (dt, dk) = (config.d_t, config.d_k);
        let phi = store.add("time.phi", rng.normal_tensor(levels, dk, 1.0));
        let wq = store.add("time.wq", rng.normal_tensor(dt, dk, 1.0 / (dt as f64).sqrt()));
        let wk = store.add("time.wk", rng.normal_tensor(dk, dk, 1.0 / (dk as f64).sqrt()));
        Ok(Self {
            config,
            levels,
            phi,
            wq,
            wk,
        })
    }

    pub fn bind(config: TimeRouterConfig, levels: usize, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (dt, dk) = (config.d_t, config.d_k);
        Ok(Self {
            phi: store.lookup("time.phi", &[levels, dk])?,
            wq: store.lookup("time.wq", &[dt, dk])?,
            wk: store.lookup("time.wk", &[dk, dk])?,
            config,
            levels,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.phi, self.wq, self.wk]
    }

    /// B × L logits `(t_c W_Q)(Φ W_K)ᵀ/√d_k` for router steps `taus`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, taus: &[f64]) -> Result<Var> {
        let dt = self.config.d_t;
        let data: Vec<f64> = taus.iter().flat_map(|&t| time_embedding(t, dt)).collect();
        let tc = tape.constant(Tensor::matrix(taus.len(), dt, data)?);
        let wq = tape.param(store, self.wq);
        let phi = tape.param(store, self.phi);
        let wk = tape.param(store, self.wk);
        let q = tape.matmul(tc, wq)?;
        let k = tape.matmul(phi, wk)?;
        let s = tape.matmul_nt(q, k)?;
        Ok(tape.scale(s, 1.0 / (self.config.d_k as f64).sqrt()))
    }
}

/// P_T for one router step.
pub fn time_weights(tau: f64, router: &TimeRouter, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let l = router.logits(&mut tape, store, &[tau])?;
    Ok(softmax_rows(tape.value(l))?.into_data())
}
