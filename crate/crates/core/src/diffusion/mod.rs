//! Miniature conditional DDPM: schedule, denoiser, routed conditioning,
//! training loss and classifier-free-guided ancestral sampling.

mod denoiser;
mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routers::{
    build_selection, kl_penalty_batch, guide_distribution, select_level, space_condition_batch, LevelSelection,
    Selection, SpaceRouter, SpaceRouterConfig, TimeRouter, TimeRouterConfig,
};
use crate::tensor::{softmax_rows, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

pub use denoiser::{denoise, BlockIds, Cond, Denoiser, DenoiserConfig};
pub use schedule::{forward_noise, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Probability of replacing the condition with the null token in training.
    pub cond_drop: f64,
    pub time: TimeRouterConfig,
    pub space: SpaceRouterConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            t_max: 30,
            beta_min: 0.01,
            beta_max: 0.3,
            cond_drop: 0.1,
            time: TimeRouterConfig::default(),
            space: SpaceRouterConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance: 15.0,
            seed: 0,
        }
    }
}

/// Ground-truth latent: √D·[y_img, y_text] laid out as n_z × d_z.
pub fn target_latent(y_img: &[f64], y_text: &[f64], n_z: usize, d_z: usize) -> Result<Tensor> {
    if y_img.len() + y_text.len() != n_z * d_z || y_img.len() != y_text.len() {
        return Err(Error::shape(
            "target_latent",
            format!("{}+{} target entries for {n_z}×{d_z} latent", y_img.len(), y_text.len()),
        ));
    }
    let s = (y_img.len() as f64).sqrt();
    let data = y_img.iter().chain(y_text).map(|x| s * x).collect();
    Tensor::matrix(n_z, d_z, data)
}

/// Time Router, Space Router and denoiser over a frozen encoder's embeddings.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub schedule: NoiseSchedule,
    /// expert count per encoder level
    pub sizes: Vec<usize>,
    pub d_embed: usize,
    pub time: TimeRouter,
    pub space: SpaceRouter,
    pub denoiser: Denoiser,
}

/// Routed conditioning for one batch.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub c: Var,
    pub attention: Var,
    pub logits: Var,
    pub p_time: Var,
    pub selection: Selection,
    pub taus: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Terms {
    pub total: Var,
    pub denoise: Var,
    pub kl: Var,
}

/// The random quantities of one stage-2 training batch.
#[derive(Clone, Debug)]
pub struct Stage2Draws {
    pub t: Vec<usize>,
    pub eps: Vec<Tensor>,
    pub drop: Vec<bool>,
}

impl Stage2Draws {
    pub fn sample(rng: &mut RngStream, batch: usize, cfg: &Stage2Config) -> Self {
        let t = (0..batch).map(|_| rng.below(cfg.t_max as u64) as usize).collect();
        let (n_z, d_z) = (cfg.denoiser.n_z, cfg.denoiser.d_z);
        let eps = (0..batch).map(|_| rng.normal_tensor(n_z, d_z, 1.0)).collect();
        let drop = (0..batch).map(|_| rng.uniform() < cfg.cond_drop).collect();
        Self { t, eps, drop }
    }
}

/// Per-step routing record from the sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub item: usize,
    /// noise index
    pub t: usize,
    /// router step T−1−t
    pub tau: usize,
    pub p_time: Vec<f64>,
    /// (level, expert, mean attention mass over latent tokens)
    pub mass: Vec<(usize, usize, f64)>,
}

fn stack_rows(ts: &[&Tensor]) -> Tensor {
    let rows: Vec<&[f64]> = ts.iter().flat_map(|t| (0..t.rows()).map(move |r| t.row_slice(r))).collect();
    Tensor::from_rows(&rows)
}

impl Stage2Model {
    pub fn init(
        config: Stage2Config,
        sizes: Vec<usize>,
        d_embed: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.t_max, config.beta_min, config.beta_max)?;
        Self::check(&config, &sizes)?;
        let time = TimeRouter::init(config.time.clone(), sizes.len(), store, &mut rng.derive(1))?;
        let space = SpaceRouter::init(
            config.space.clone(),
            config.denoiser.d_z,
            d_embed,
            store,
            &mut rng.derive(2),
        )?;
        let denoiser = Denoiser::init(config.denoiser.clone(), config.space.d_c, store, &mut rng.derive(3))?;
        Ok(Self {
            config,
            schedule,
            sizes,
            d_embed,
            time,
            space,
            denoiser,
        })
    }

    pub fn bind(config: Stage2Config, sizes: Vec<usize>, d_embed: usize, store: &ParamStore) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.t_max, config.beta_min, config.beta_max)?;
        Self::check(&config, &sizes)?;
        Ok(Self {
            time: TimeRouter::bind(config.time.clone(), sizes.len(), store)?,
            space: SpaceRouter::bind(config.space.clone(), config.denoiser.d_z, d_embed, store)?,
            denoiser: Denoiser::bind(config.denoiser.clone(), config.space.d_c, store)?,
            config,
            schedule,
            sizes,
            d_embed,
        })
    }

    fn check(config: &Stage2Config, sizes: &[usize]) -> Result<()> {
        if sizes.is_empty() {
            return Err(Error::Config("stage 2 needs at least one encoder level".into()));
        }
        if !(0.0..1.0).contains(&config.cond_drop) {
            return Err(Error::Config(format!("cond_drop {} outside [0, 1)", config.cond_drop)));
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.time.ids();
        v.extend(self.space.ids());
        v.extend(self.denoiser.ids());
        v
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn guide(&self, tau: usize) -> Vec<f64> {
        guide_distribution(tau as f64, self.config.t_max, self.levels(), self.config.time.sigma)
    }

    /// Time- and space-routed conditioning tokens for latents `z` at noise indices `t`.
    pub fn condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        t: &[usize],
        stacked: &[&Tensor],
    ) -> Result<Conditioning> {
        let t_max = self.config.t_max;
        if let Some(&bad) = t.iter().find(|&&ti| ti >= t_max) {
            return Err(Error::invalid("condition", format!("timestep {bad} ≥ T = {t_max}")));
        }
        let taus: Vec<usize> = t.iter().map(|&ti| t_max - 1 - ti).collect();
        let tf: Vec<f64> = taus.iter().map(|&x| x as f64).collect();
        let logits = self.time.logits(tape, store, &tf)?;
        let p_time = tape.softmax_rows(logits)?;
        let pv = tape.value(p_time).clone();
        let choice: Vec<LevelSelection> = taus
            .iter()
            .enumerate()
            .map(|(b, &tau)| select_level(self.config.time.mode, pv.row_slice(b), tau, t_max, self.levels()))
            .collect();
        let selection = build_selection(stacked, &self.sizes, &choice)?;
        let n_z = self.config.denoiser.n_z;
        let (c, attention) = space_condition_batch(tape, store, &self.space, z, n_z, &selection, Some(p_time))?;
        Ok(Conditioning {
            c,
            attention,
            logits,
            p_time,
            selection,
            taus,
        })
    }

    /// Denoising loss (mean over the batch of ‖ε − ε̂‖²) plus λ_T·KL(P_T ‖ guide).
    pub fn loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z0: &[&Tensor],
        stacked: &[&Tensor],
        draws: &Stage2Draws,
    ) -> Result<Stage2Terms> {
        let batch = z0.len();
        if stacked.len() != batch || draws.t.len() != batch {
            return Err(Error::shape("stage2_loss", "batch pieces disagree in length"));
        }
        let noisy: Vec<Tensor> = (0..batch)
            .map(|b| forward_noise(z0[b], &draws.eps[b], self.schedule.alpha_bar[draws.t[b]]))
            .collect::<Result<_>>()?;
        let zt = tape.constant(stack_rows(&noisy.iter().collect::<Vec<_>>()));
        let eps = tape.constant(stack_rows(&draws.eps.iter().collect::<Vec<_>>()));
        let cond = self.condition(tape, store, zt, &draws.t, stacked)?;
        let eps_hat = self
            .denoiser
            .forward(tape, store, zt, &draws.t, Cond::Dropped(cond.c, &draws.drop))?;
        let d = tape.sub(eps, eps_hat)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        let denoise = tape.scale(s, 1.0 / batch as f64);
        let guide = Tensor::from_rows(
            &cond
                .taus
                .iter()
                .map(|&tau| self.guide(tau))
                .collect::<Vec<_>>()
                .iter()
                .map(Vec::as_slice)
                .collect::<Vec<_>>(),
        );
        let kl = kl_penalty_batch(tape, cond.logits, &guide)?;
        let lam = self.config.time.lambda;
        let total = if lam > 0.0 {
            let k = tape.scale(kl, lam);
            tape.add(denoise, k)?
        } else {
            denoise
        };
        Ok(Stage2Terms { total, denoise, kl })
    }

    /// Draw timesteps, noise and null-drop flags from `rng`, then evaluate the loss.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z0: &[&Tensor],
        stacked: &[&Tensor],
        rng: &mut RngStream,
    ) -> Result<Stage2Terms> {
        let draws = Stage2Draws::sample(rng, z0.len(), &self.config);
        self.loss_with(tape, store, z0, stacked, &draws)
    }

    /// Noise indices visited by a `steps`-step sampler, descending.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.config.t_max;
        if steps == 0 || steps > t_max {
            return Err(Error::Config(format!("sampling steps {steps} outside 1..={t_max}")));
        }
        if steps == 1 {
            return Ok(vec![t_max - 1]);
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| ((i * (t_max - 1)) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }

    /// Ancestral sampling with guidance `ε̂_u + s(ε̂_c − ε̂_u)`; items are
    /// processed in chunks and draw noise from one stream in item order.
    pub fn sample(
        &self,
        store: &ParamStore,
        stacked: &[&Tensor],
        gen: &GenConfig,
        trace: bool,
    ) -> Result<(Vec<Tensor>, Vec<StepTrace>)> {
        const CHUNK: usize = 32;
        if !(gen.guidance >= 0.0) {
            return Err(Error::Config(format!("guidance {} must be ≥ 0", gen.guidance)));
        }
        let ts = self.timesteps(gen.steps)?;
        let (n_z, d_z) = (self.config.denoiser.n_z, self.config.denoiser.d_z);
        let mut rng = RngStream::new(gen.seed, 0x5A4D_504C);
        let mut out = Vec::with_capacity(stacked.len());
        let mut traces = Vec::new();
        for (ci, chunk) in stacked.chunks(CHUNK).enumerate() {
            let nb = chunk.len();
            let mut z = rng.normal_tensor(nb * n_z, d_z, 1.0);
            for (si, &t) in ts.iter().enumerate() {
                let tb = vec![t; nb];
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let need_cond = gen.guidance != 0.0 || trace;
                let need_uncond = gen.guidance != 1.0;
                let cond = if need_cond {
                    Some(self.condition(&mut tape, store, zv, &tb, chunk)?)
                } else {
                    None
                };
                if let (true, Some(c)) = (trace, &cond) {
                    traces.extend(self.trace_rows(&tape, c, ci * CHUNK, t));
                }
                let eu = if need_uncond {
                    Some(self.denoiser.forward(&mut tape, store, zv, &tb, Cond::Null)?)
                } else {
                    None
                };
                let ec = match (&cond, gen.guidance != 0.0) {
                    (Some(c), true) => Some(self.denoiser.forward(&mut tape, store, zv, &tb, Cond::Tokens(c.c))?),
                    _ => None,
                };
                let eps: Vec<f64> = match (eu, ec) {
                    (Some(u), Some(c)) => tape
                        .value(u)
                        .data()
                        .iter()
                        .zip(tape.value(c).data())
                        .map(|(u, c)| u + gen.guidance * (c - u))
                        .collect(),
                    (Some(u), None) => tape.value(u).data().to_vec(),
                    (None, Some(c)) => tape.value(c).data().to_vec(),
                    (None, None) => unreachable!("guidance is either 1 or not"),
                };
                let ab = self.schedule.alpha_bar[t];
                let ab_prev = ts.get(si + 1).map_or(1.0, |&tp| self.schedule.alpha_bar[tp]);
                let alpha = ab / ab_prev;
                let beta = 1.0 - alpha;
                let coef = beta / (1.0 - ab).sqrt();
                let inv = 1.0 / alpha.sqrt();
                let last = si + 1 == ts.len();
                let sigma = if last {
                    0.0
                } else {
                    (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
                };
                let zd = z.data_mut();
                for (zi, e) in zd.iter_mut().zip(&eps) {
                    *zi = (*zi - coef * e) * inv;
                }
                if !last {
                    for zi in zd.iter_mut() {
                        *zi += sigma * rng.normal();
                    }
                }
                if !z.is_finite() {
                    return Err(Error::Divergence {
                        step: si,
                        detail: format!("sampler produced non-finite latents at t={t}"),
                    });
                }
            }
            for b in 0..nb {
                let rows: Vec<&[f64]> = (0..n_z).map(|r| z.row_slice(b * n_z + r)).collect();
                out.push(Tensor::from_rows(&rows));
            }
        }
        Ok((out, traces))
    }

    fn trace_rows(&self, tape: &Tape, c: &Conditioning, first_item: usize, t: usize) -> Vec<StepTrace> {
        let n_z = self.config.denoiser.n_z;
        let att = tape.value(c.attention);
        let p = tape.value(c.p_time);
        let sel = &c.selection;
        (0..sel.offsets.len() - 1)
            .map(|b| {
                let mut mass: Vec<(usize, usize, f64)> = Vec::new();
                for r in sel.offsets[b]..sel.offsets[b + 1] {
                    let m: f64 = (0..n_z).map(|q| att.get(b * n_z + q, r)).sum::<f64>() / n_z as f64;
                    let key = (sel.level[r], sel.expert[r]);
                    match mass.iter_mut().find(|(l, e, _)| (*l, *e) == key) {
                        Some(entry) => entry.2 += m,
                        None => mass.push((key.0, key.1, m)),
                    }
                }
                StepTrace {
                    item: first_item + b,
                    t,
                    tau: c.taus[b],
                    p_time: p.row_slice(b).to_vec(),
                    mass,
                }
            })
            .collect()
    }

    /// P_T for every router step τ = 0..T−1 (rows indexed by τ).
    pub fn time_preference(&self, store: &ParamStore) -> Result<Tensor> {
        let mut tape = Tape::new();
        let taus: Vec<f64> = (0..self.config.t_max).map(|t| t as f64).collect();
        let l = self.time.logits(&mut tape, store, &taus)?;
        softmax_rows(tape.value(l))
    }
}
