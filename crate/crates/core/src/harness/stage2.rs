use std::path::Path;

use crate::diffusion::{target_latent, GenConfig, Stage2Draws, Stage2Model};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::metrics::{moving_average, mse, spearman, MetricsReport};
use crate::harness::stage1::{check_step, diverged, encode_all, eval_points, Batcher};
use crate::routers::kl_penalty;
use crate::tensor::{Adam, ParamStore, RngStream, Tape, Tensor};
use crate::world::Dataset;

/// Held-out items scored for the periodic denoising loss.
const EVAL_ITEMS: usize = 64;

pub struct Stage2Run {
    pub checkpoint: Checkpoint,
    pub model: Stage2Model,
    pub report: MetricsReport,
}

/// Target latents of every sample.
pub fn latents(data: &Dataset, model: &Stage2Model) -> Result<Vec<Tensor>> {
    let (n_z, d_z) = (model.config.denoiser.n_z, model.config.denoiser.d_z);
    (0..data.len())
        .map(|r| target_latent(data.y_img.row_slice(r), data.y_text.row_slice(r), n_z, d_z))
        .collect()
}

/// Re-attach the encoder of a checkpoint.
pub fn bind_encoder(ck: &Checkpoint) -> Result<Encoder> {
    let cfg = &ck.manifest.config;
    Encoder::bind(cfg.model.clone(), cfg.data.world.voxels, &ck.store)
}

/// Re-attach the stage-2 model of a checkpoint.
pub fn bind_stage2(ck: &Checkpoint) -> Result<Stage2Model> {
    let cfg = &ck.manifest.config;
    Stage2Model::bind(cfg.stage2.model.clone(), cfg.model.expert_counts(), cfg.model.d_embed, &ck.store)
}

/// Batch-mean KL(P_T ‖ guide) over every router step.
pub fn mean_time_kl(model: &Stage2Model, store: &ParamStore) -> Result<f64> {
    let p = model.time_preference(store)?;
    let t = model.config.t_max;
    let mut total = 0.0;
    for tau in 0..t {
        total += kl_penalty(p.row_slice(tau), &model.guide(tau))?;
    }
    Ok(total / t as f64)
}

/// E_{P_T}[level] for each router step τ, and its Spearman correlation with τ.
pub fn expected_levels(model: &Stage2Model, store: &ParamStore) -> Result<(Vec<f64>, f64)> {
    let p = model.time_preference(store)?;
    let levels: Vec<f64> = (0..p.rows())
        .map(|tau| p.row_slice(tau).iter().enumerate().map(|(l, w)| l as f64 * w).sum())
        .collect();
    let taus: Vec<f64> = (0..p.rows()).map(|t| t as f64).collect();
    let rho = spearman(&levels, &taus)?;
    Ok((levels, rho))
}

fn denoise_loss(
    model: &Stage2Model,
    store: &ParamStore,
    z0: &[&Tensor],
    stacked: &[&Tensor],
    draws: &Stage2Draws,
) -> Result<f64> {
    let mut tape = Tape::new();
    let terms = model.loss_with(&mut tape, store, z0, stacked, draws)?;
    Ok(tape.value(terms.denoise).item())
}

/// Train the Time Router, Space Router and denoiser on embeddings of the
/// frozen stage-1 encoder (computed once up front).
pub fn train_stage2(
    cfg: &RunConfig,
    stage1: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    diag: Option<&Path>,
) -> Result<Stage2Run> {
    let mut cfg = cfg.clone();
    cfg.model = stage1.manifest.config.model.clone();
    cfg.data.world = stage1.manifest.config.data.world.clone();
    cfg.validate()?;
    let tc = cfg.stage2.train.clone();
    let mut store = stage1.store.clone();
    let enc = bind_encoder(stage1)?;
    store.freeze_all();
    let (stacked, _) = encode_all(&enc, &store, &train.x)?;
    let n_eval = EVAL_ITEMS.min(test.len());
    let (test_stacked, _) = encode_all(&enc, &store, &test.select(&(0..n_eval).collect::<Vec<_>>()).x)?;

    let model = Stage2Model::init(
        cfg.stage2.model.clone(),
        cfg.model.expert_counts(),
        cfg.model.d_embed,
        &mut store,
        &mut RngStream::new(cfg.seed, 3),
    )?;
    let z0 = latents(train, &model)?;
    let test_z0 = latents(&test.select(&(0..n_eval).collect::<Vec<_>>()), &model)?;
    let eval_draws = Stage2Draws::sample(&mut RngStream::new(cfg.seed, 6), n_eval, &model.config);
    let tz: Vec<&Tensor> = test_z0.iter().collect();
    let ts: Vec<&Tensor> = test_stacked.iter().collect();

    let mut adam = Adam::new(tc.adam);
    let mut batches = Batcher::new(train.len(), tc.batch, RngStream::new(cfg.seed, 4));
    let mut noise = RngStream::new(cfg.seed, 5);
    let mut report = MetricsReport::default();
    let eval_now = eval_points(&tc);
    let kl_initial = mean_time_kl(&model, &store)?;
    let mut denoise_hist = Vec::with_capacity(tc.steps);

    for step in 0..=tc.steps {
        if eval_now(step) {
            let den = check_step(denoise_loss(&model, &store, &tz, &ts, &eval_draws), step, "stage2", &cfg, &store, diag)?;
            let kl = check_step(mean_time_kl(&model, &store), step, "stage2", &cfg, &store, diag)?;
            report.push("test_denoise", step as u64, den);
            report.push("time_kl_mean", step as u64, kl);
        }
        if step == tc.steps {
            break;
        }
        let idx = batches.next();
        let zb: Vec<&Tensor> = idx.iter().map(|&i| &z0[i]).collect();
        let eb: Vec<&Tensor> = idx.iter().map(|&i| &stacked[i]).collect();
        let mut tape = Tape::new();
        let terms = check_step(model.loss(&mut tape, &store, &zb, &eb, &mut noise), step, "stage2", &cfg, &store, diag)?;
        let total = tape.value(terms.total).item();
        if !total.is_finite() {
            return Err(diverged(step, "stage-2 loss", "stage2", &cfg, &store, diag));
        }
        let s = step as u64;
        let den = tape.value(terms.denoise).item();
        report.push("loss", s, total);
        report.push("loss_denoise", s, den);
        if cfg.stage2.model.time.lambda > 0.0 {
            report.push("loss_kl", s, tape.value(terms.kl).item());
        }
        denoise_hist.push(den);
        let grads = check_step(tape.backward(terms.total), step, "stage2", &cfg, &store, diag)?;
        if !grads.global_norm().is_finite() {
            return Err(diverged(step, "stage-2 gradient", "stage2", &cfg, &store, diag));
        }
        adam.step(&mut store, &grads)?;
    }

    let (levels, rho) = expected_levels(&model, &store)?;
    for (tau, l) in levels.iter().enumerate() {
        report.push("expected_level", tau as u64, *l);
    }
    report.set("kl_initial", kl_initial);
    report.set("kl_final", mean_time_kl(&model, &store)?);
    report.set("spearman_level_tau", rho);
    report.set("steps", tc.steps as f64);
    if !denoise_hist.is_empty() {
        let ma = moving_average(&denoise_hist, 100);
        report.set("denoise_ma_first", ma[ma.len().min(100) - 1]);
        report.set("denoise_ma_last", *ma.last().expect("non-empty"));
    }
    for id in model.ids() {
        store.set_frozen(id, false);
    }
    for id in enc.all_ids() {
        store.set_frozen(id, false);
    }
    let checkpoint = Checkpoint::new("stage2", cfg, tc.steps as u64, report.summary.clone(), store);
    Ok(Stage2Run {
        checkpoint,
        model,
        report,
    })
}

/// Mean MSE of sampled ẑ₀ to the ground-truth latents, with the given
/// generation settings.
pub fn sample_mse(
    model: &Stage2Model,
    store: &ParamStore,
    stacked: &[&Tensor],
    z0: &[Tensor],
    gen: &GenConfig,
) -> Result<f64> {
    if stacked.len() != z0.len() || z0.is_empty() {
        return Err(Error::invalid("sample_mse", "one latent per item required"));
    }
    let (zs, _) = model.sample(store, stacked, gen, false)?;
    let mut total = 0.0;
    for (a, b) in zs.iter().zip(z0) {
        total += mse(a.data(), b.data())?;
    }
    Ok(total / z0.len() as f64)
}
