use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use crate::encoder::{encode_batch, stage1_loss, EncodeOptions, Encoder};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::metrics::MetricsReport;
use crate::harness::stage1::{check_step, diverged, evaluate, rows_of, voxel_fingerprints, Batcher, FINGERPRINT_NAME};
use crate::harness::stage2::bind_encoder;
use crate::harness::AUX_PREFIX;
use crate::tensor::{Adam, ParamId, ParamStore, RngStream, Tape, Tensor};
use crate::world::Dataset;

/// Scale that turns fingerprint similarities in [−1, 1] into integer weights.
const MATCH_SCALE: f64 = 1e9;

/// Assign each new-subject voxel to a distinct source voxel, maximizing the
/// summed fingerprint similarity. `result[i]` is the source voxel of new voxel `i`.
pub fn match_voxels(new: &Tensor, source: &Tensor) -> Result<Vec<usize>> {
    if new.shape() != source.shape() {
        return Err(Error::shape("match_voxels", format!("{:?} vs {:?}", new.shape(), source.shape())));
    }
    let v = new.rows();
    let weights = Matrix::from_fn(v, v, |(i, j)| {
        let s: f64 = new.row_slice(i).iter().zip(source.row_slice(j)).map(|(a, b)| a * b).sum();
        (s * MATCH_SCALE).round() as i64
    });
    Ok(kuhn_munkres(&weights).1)
}

pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
    /// |U| + Σ_l |W_r^(l)|
    pub trainable: usize,
    /// all model parameters (auxiliary arrays excluded)
    pub total: usize,
    /// source voxel chosen for each new voxel by the warm start
    pub matching: Option<Vec<usize>>,
}

fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| store.get(id).clone()).collect()
}

/// Adapt only U and the voxel routers of `ck` to a new subject, using the
/// first `fraction` of `data`. The tail `holdout` share of that subset picks
/// the best step (step 0 included); `test` is only reported.
pub fn finetune_routers(
    cfg: &RunConfig,
    ck: &Checkpoint,
    data: &Dataset,
    fraction: f64,
    test: &Dataset,
) -> Result<FinetuneRun> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n_sub = (fraction * data.len() as f64).floor() as usize;
    if n_sub == 0 {
        return Err(Error::invalid("finetune_routers", "empty finetuning subset"));
    }
    let ft = &cfg.finetune;
    let n_val = (ft.holdout * n_sub as f64).floor() as usize;
    let n_fit = n_sub - n_val;
    let fit = data.select(&(0..n_fit).collect::<Vec<_>>());
    let val = if n_val == 0 {
        fit.clone()
    } else {
        data.select(&(n_fit..n_sub).collect::<Vec<_>>())
    };

    let mut store = ck.store.clone();
    let enc: Encoder = bind_encoder(ck)?;
    let (pre_img, pre_text) = evaluate(&enc, &store, test)?;
    let mut report = MetricsReport::default();
    report.set("pre_cosine_img", pre_img);
    report.set("pre_cosine_text", pre_text);

    let matching = match (ft.warm_start, store.id(FINGERPRINT_NAME)) {
        (true, Some(fid)) if n_fit >= 2 => {
            let m = match_voxels(&voxel_fingerprints(&fit)?, store.get(fid))?;
            let u = store.get(enc.u).clone();
            let rows: Vec<&[f64]> = m.iter().map(|&j| u.row_slice(j)).collect();
            store.assign(enc.u, Tensor::from_rows(&rows))?;
            let (wi, wt) = evaluate(&enc, &store, test)?;
            report.set("warm_cosine_img", wi);
            report.set("warm_cosine_text", wt);
            Some(m)
        }
        _ => None,
    };

    store.freeze_all();
    let train_ids = enc.router_ids();
    for &id in &train_ids {
        store.set_frozen(id, false);
    }
    let trainable = store.trainable_numel();
    let total: usize = store
        .iter()
        .filter(|(_, n, _)| !n.starts_with(AUX_PREFIX))
        .map(|(_, _, t)| t.len())
        .sum();

    let tc = &ft.train;
    let mut adam = Adam::new(tc.adam);
    let mut batches = Batcher::new(fit.len(), tc.batch, RngStream::new(cfg.seed, 7));
    let mut best = (evaluate(&enc, &store, &val)?.0, 0usize, snapshot(&store, &train_ids));
    report.push("val_cosine_img", 0, best.0);
    for step in 1..=tc.steps {
        let idx = batches.next();
        let mut tape = Tape::new();
        let x = tape.constant(rows_of(&fit.x, &idx));
        let gi = tape.constant(rows_of(&fit.y_img, &idx));
        let gt = tape.constant(rows_of(&fit.y_text, &idx));
        let terms = encode_batch(&mut tape, &enc, &store, x, EncodeOptions::default())
            .and_then(|out| stage1_loss(&mut tape, &out, gi, gt, &cfg.stage1.weights));
        let terms = check_step(terms, step, "finetune", cfg, &store, None)?;
        let total_loss = tape.value(terms.total).item();
        if !total_loss.is_finite() {
            return Err(diverged(step, "finetune loss", "finetune", cfg, &store, None));
        }
        report.push("loss", step as u64, total_loss);
        let grads = check_step(tape.backward(terms.total), step, "finetune", cfg, &store, None)?;
        if !grads.global_norm().is_finite() {
            return Err(diverged(step, "finetune gradient", "finetune", cfg, &store, None));
        }
        adam.step(&mut store, &grads)?;
        if step == tc.steps || (tc.eval_every > 0 && step % tc.eval_every == 0) {
            let c = check_step(evaluate(&enc, &store, &val), step, "finetune", cfg, &store, None)?.0;
            report.push("val_cosine_img", step as u64, c);
            if c > best.0 {
                best = (c, step, snapshot(&store, &train_ids));
            }
        }
    }
    for (&id, t) in train_ids.iter().zip(best.2) {
        store.assign(id, t)?;
    }
    let (post_img, post_text) = evaluate(&enc, &store, test)?;
    report.set("post_cosine_img", post_img);
    report.set("post_cosine_text", post_text);
    report.set("best_step", best.1 as f64);
    report.set("fraction", fraction);
    report.set("subset_size", n_sub as f64);
    report.set("trainable_params", trainable as f64);
    report.set("total_params", total as f64);
    report.set("trainable_fraction", trainable as f64 / total as f64);

    let mut out_cfg = ck.manifest.config.clone();
    out_cfg.finetune = cfg.finetune.clone();
    out_cfg.finetune.fraction = fraction;
    for id in store.ids().collect::<Vec<_>>() {
        store.set_frozen(id, false);
    }
    let checkpoint = Checkpoint::new("finetune", out_cfg, best.1 as u64, report.summary.clone(), store);
    Ok(FinetuneRun {
        checkpoint,
        report,
        trainable,
        total,
        matching,
    })
}
