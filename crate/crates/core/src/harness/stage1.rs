use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::{encode_batch, stage1_loss, EncodeOptions, Encoder, HierarchyAssignment};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, AUX_PREFIX};
use crate::harness::config::{RunConfig, TrainConfig};
use crate::harness::metrics::{mean_cosine, moving_average, MetricsReport};
use crate::routers::stack_embeddings;
use crate::tensor::{Adam, ParamStore, RngStream, Tape, Tensor};
use crate::world::Dataset;

pub const FINGERPRINT_NAME: &str = "aux.fingerprint";
const PREDICT_CHUNK: usize = 256;

/// Epoch-shuffled minibatch indices.
pub(crate) struct Batcher {
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    pub(crate) fn new(n: usize, batch: usize, rng: RngStream) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    pub(crate) fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

pub(crate) fn rows_of(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row_slice(i)).collect();
    Tensor::from_rows(&rows)
}

pub(crate) fn eval_points(train: &TrainConfig) -> impl Fn(usize) -> bool + '_ {
    move |step| step == train.steps || (train.eval_every > 0 && step % train.eval_every == 0)
}

/// Aggregated image and text predictions for every row of `x`.
pub fn predict(enc: &Encoder, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut img = Vec::with_capacity(x.rows() * enc.config.d_embed);
    let mut text = Vec::with_capacity(x.rows() * enc.config.d_embed);
    for start in (0..x.rows()).step_by(PREDICT_CHUNK) {
        let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(x.rows())).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(rows_of(x, &idx));
        let out = encode_batch(&mut tape, enc, store, xv, EncodeOptions::default())?;
        img.extend_from_slice(tape.value(out.img).data());
        text.extend_from_slice(tape.value(out.text).data());
    }
    let d = enc.config.d_embed;
    Ok((Tensor::matrix(x.rows(), d, img)?, Tensor::matrix(x.rows(), d, text)?))
}

/// Per-sample level-major expert embeddings (the stage-2 conditioning source)
/// and routing assignments.
pub fn encode_all(enc: &Encoder, store: &ParamStore, x: &Tensor) -> Result<(Vec<Tensor>, Vec<HierarchyAssignment>)> {
    let mut stacked = Vec::with_capacity(x.rows());
    let mut assignments = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(PREDICT_CHUNK) {
        let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(x.rows())).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(rows_of(x, &idx));
        let out = encode_batch(&mut tape, enc, store, xv, EncodeOptions::default())?;
        stacked.extend(out.embeddings(&tape).iter().map(stack_embeddings));
        assignments.extend(out.assignments);
    }
    Ok((stacked, assignments))
}

/// Held-out image/text cosine.
pub fn evaluate(enc: &Encoder, store: &ParamStore, data: &Dataset) -> Result<(f64, f64)> {
    let (img, text) = predict(enc, store, &data.x)?;
    Ok((mean_cosine(&img, &data.y_img)?, mean_cosine(&text, &data.y_text)?))
}

/// v × 2D voxel fingerprints: Pearson correlation of each voxel with each
/// target coordinate, rows L2-normalized. Invariant to positive voxel gains.
pub fn voxel_fingerprints(data: &Dataset) -> Result<Tensor> {
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid("fingerprint", "need at least two samples"));
    }
    let center = |t: &Tensor| -> Tensor {
        let mut c = t.clone();
        for j in 0..t.cols() {
            let m = (0..n).map(|r| t.get(r, j)).sum::<f64>() / n as f64;
            let s = (0..n).map(|r| (t.get(r, j) - m).powi(2)).sum::<f64>().sqrt();
            let s = if s == 0.0 { 1.0 } else { s };
            for r in 0..n {
                c.set(r, j, (t.get(r, j) - m) / s);
            }
        }
        c
    };
    let x = center(&data.x);
    let yi = center(&data.y_img);
    let yt = center(&data.y_text);
    let (v, d) = (data.voxels(), data.target());
    let mut fp = Tensor::zeros(v, 2 * d);
    for i in 0..v {
        for (k, y) in [&yi, &yt].into_iter().enumerate() {
            for j in 0..d {
                let c: f64 = (0..n).map(|r| x.get(r, i) * y.get(r, j)).sum();
                fp.set(i, k * d + j, c);
            }
        }
        let norm = fp.row_slice(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            for j in 0..2 * d {
                fp.set(i, j, fp.get(i, j) / norm);
            }
        }
    }
    Ok(fp)
}

pub struct Stage1Run {
    pub checkpoint: Checkpoint,
    pub encoder: Encoder,
    pub report: MetricsReport,
}

pub(crate) fn diverged(
    step: usize,
    what: &str,
    kind: &str,
    cfg: &RunConfig,
    store: &ParamStore,
    diag: Option<&Path>,
) -> Error {
    if let Some(dir) = diag {
        let mut ck = Checkpoint::new(kind, cfg.clone(), step as u64, BTreeMap::new(), store.clone());
        // best effort: the divergence itself is the error worth reporting
        let _ = ck.save(dir, &format!("{kind}_diverged"));
    }
    Error::Divergence {
        step,
        detail: format!("non-finite {what}"),
    }
}

/// A non-finite value raised inside a training step is divergence as well.
pub(crate) fn check_step<T>(
    r: Result<T>,
    step: usize,
    kind: &str,
    cfg: &RunConfig,
    store: &ParamStore,
    diag: Option<&Path>,
) -> Result<T> {
    match r {
        Err(Error::NonFinite { op }) => Err(diverged(step, &format!("value in {op}"), kind, cfg, store, diag)),
        r => r,
    }
}

/// Train experts, routers, U and heads on the stage-1 objective. On a
/// non-finite loss the pre-step parameters are saved to `diag` (if given).
pub fn train_stage1(cfg: &RunConfig, train: &Dataset, test: &Dataset, diag: Option<&Path>) -> Result<Stage1Run> {
    cfg.validate()?;
    if train.voxels() != cfg.data.world.voxels || train.target() != cfg.model.d_embed {
        return Err(Error::Config("dataset shape does not match the configured world/model".into()));
    }
    let tc = &cfg.stage1.train;
    let mut store = ParamStore::new();
    let enc = Encoder::init(cfg.model.clone(), train.voxels(), &mut store, &mut RngStream::new(cfg.seed, 1))?;
    let mut adam = Adam::new(tc.adam);
    let mut batches = Batcher::new(train.len(), tc.batch, RngStream::new(cfg.seed, 2));
    let mut report = MetricsReport::default();
    let eval_now = eval_points(tc);
    let mut totals = Vec::with_capacity(tc.steps);

    for step in 0..=tc.steps {
        if eval_now(step) {
            let (ci, ct) = check_step(evaluate(&enc, &store, test), step, "stage1", cfg, &store, diag)?;
            report.push("test_cosine_img", step as u64, ci);
            report.push("test_cosine_text", step as u64, ct);
        }
        if step == tc.steps {
            break;
        }
        let idx = batches.next();
        let mut tape = Tape::new();
        let x = tape.constant(rows_of(&train.x, &idx));
        let gi = tape.constant(rows_of(&train.y_img, &idx));
        let gt = tape.constant(rows_of(&train.y_text, &idx));
        let terms = encode_batch(&mut tape, &enc, &store, x, EncodeOptions::default())
            .and_then(|out| stage1_loss(&mut tape, &out, gi, gt, &cfg.stage1.weights));
        let terms = check_step(terms, step, "stage1", cfg, &store, diag)?;
        let total = tape.value(terms.total).item();
        if !total.is_finite() {
            return Err(diverged(step, "stage-1 loss", "stage1", cfg, &store, diag));
        }
        let s = step as u64;
        report.push("loss", s, total);
        report.push("loss_mse", s, tape.value(terms.mse).item());
        report.push("loss_contrastive", s, tape.value(terms.contrastive).item());
        report.push("loss_balance", s, tape.value(terms.balance).item());
        totals.push(total);
        let grads = check_step(tape.backward(terms.total), step, "stage1", cfg, &store, diag)?;
        if !grads.global_norm().is_finite() {
            return Err(diverged(step, "stage-1 gradient", "stage1", cfg, &store, diag));
        }
        adam.step(&mut store, &grads)?;
    }

    let (ci, ct) = evaluate(&enc, &store, test)?;
    let (pi, pt) = predict(&enc, &store, &test.x)?;
    let mse_img = crate::harness::metrics::mse(pi.data(), test.y_img.data())?;
    let mse_text = crate::harness::metrics::mse(pt.data(), test.y_text.data())?;
    report.set("cosine_img", ci);
    report.set("cosine_text", ct);
    report.set("mse", 0.5 * (mse_img + mse_text));
    report.set("steps", tc.steps as f64);
    if !totals.is_empty() {
        let ma = moving_average(&totals, 100);
        report.set("loss_ma_first", ma[ma.len().min(100) - 1]);
        report.set("loss_ma_last", *ma.last().expect("non-empty"));
    }
    store.add(FINGERPRINT_NAME, voxel_fingerprints(train)?);
    debug_assert!(FINGERPRINT_NAME.starts_with(AUX_PREFIX));
    let checkpoint = Checkpoint::new("stage1", cfg.clone(), tc.steps as u64, report.summary.clone(), store);
    Ok(Stage1Run {
        checkpoint,
        encoder: enc,
        report,
    })
}
