use nalgebra::{DMatrix, SymmetricEigen};

use crate::diffusion::{GenConfig, StepTrace, Stage2Model};
use crate::encoder::{encode, encode_batch, EncodeOptions, Encoder, HierarchyAssignment};
use crate::error::{Error, Result};
use crate::harness::metrics::{cosine, rand_index, random_partition_baseline, spearman, Ridge};
use crate::harness::stage1::{encode_all, predict};
use crate::tensor::{ParamStore, RngStream, Tape, Tensor};
use crate::world::Dataset;

/// Affine projection onto the top principal directions of a point cloud.
#[derive(Clone, Debug)]
pub struct PrincipalSubspace {
    mean: Vec<f64>,
    /// D × D, columns sorted by decreasing variance
    basis: DMatrix<f64>,
}

impl PrincipalSubspace {
    pub fn fit(points: &Tensor) -> Result<Self> {
        let (n, d) = (points.rows(), points.cols());
        if n < 2 {
            return Err(Error::invalid("pca", "need at least two points"));
        }
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|r| points.get(r, j)).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |r, j| points.get(r, j) - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let basis = DMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
        Ok(Self { mean, basis })
    }

    /// μ + V_r V_rᵀ (p − μ) for every row.
    pub fn project(&self, points: &Tensor, rank: usize) -> Result<Tensor> {
        let d = self.mean.len();
        if rank > d || points.cols() != d {
            return Err(Error::invalid("pca_project", format!("rank {rank} for width {d}")));
        }
        let vr = self.basis.columns(0, rank);
        let mut out = points.clone();
        for r in 0..points.rows() {
            let c = DMatrix::from_fn(d, 1, |j, _| points.get(r, j) - self.mean[j]);
            let p = vr * (vr.transpose() * c);
            for j in 0..d {
                out.set(r, j, self.mean[j] + p[(j, 0)]);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckRow {
    /// `None` marks the random-input baseline row.
    pub rank: Option<usize>,
    pub cosine_img: f64,
    pub cosine_text: f64,
}

fn mean_cos(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows()).map(|r| cosine(a.row_slice(r), b.row_slice(r))).sum::<f64>() / a.rows() as f64
}

/// Random voxel activity with the per-voxel mean and spread of `data`.
pub fn random_inputs(data: &Dataset, n: usize, seed: u64) -> Tensor {
    let (rows, v) = (data.len() as f64, data.voxels());
    let stats: Vec<(f64, f64)> = (0..v)
        .map(|i| {
            let m = (0..data.len()).map(|r| data.x.get(r, i)).sum::<f64>() / rows;
            let s = ((0..data.len()).map(|r| (data.x.get(r, i) - m).powi(2)).sum::<f64>() / rows).sqrt();
            (m, s)
        })
        .collect();
    let mut rng = RngStream::new(seed, 0x524E_4458);
    let mut t = Tensor::zeros(n, v);
    for r in 0..n {
        for (i, (m, s)) in stats.iter().enumerate() {
            t.set(r, i, m + s * rng.normal());
        }
    }
    t
}

/// Cosine of predictions from random activity against the real targets of `test`.
pub fn random_input_cosine(enc: &Encoder, store: &ParamStore, train: &Dataset, test: &Dataset, seed: u64) -> Result<(f64, f64)> {
    let x = random_inputs(train, test.len(), seed);
    let (pi, pt) = predict(enc, store, &x)?;
    Ok((mean_cos(&pi, &test.y_img), mean_cos(&pt, &test.y_text)))
}

/// Cosine after squeezing test predictions through rank-r principal
/// subspaces fitted on train predictions; rank 0 scores 0 by convention.
/// The last row is the random-input baseline.
pub fn bottleneck_eval(
    enc: &Encoder,
    store: &ParamStore,
    train: &Dataset,
    test: &Dataset,
    ranks: &[usize],
    seed: u64,
) -> Result<Vec<BottleneckRow>> {
    let d = enc.config.d_embed;
    if let Some(&r) = ranks.iter().find(|&&r| r > d) {
        return Err(Error::invalid("bottleneck_eval", format!("rank {r} exceeds D = {d}")));
    }
    let (tr_i, tr_t) = predict(enc, store, &train.x)?;
    let (te_i, te_t) = predict(enc, store, &test.x)?;
    let (pca_i, pca_t) = (PrincipalSubspace::fit(&tr_i)?, PrincipalSubspace::fit(&tr_t)?);
    let mut rows = Vec::with_capacity(ranks.len() + 1);
    for &r in ranks {
        let (ci, ct) = if r == 0 {
            (0.0, 0.0)
        } else {
            (
                mean_cos(&pca_i.project(&te_i, r)?, &test.y_img),
                mean_cos(&pca_t.project(&te_t, r)?, &test.y_text),
            )
        };
        rows.push(BottleneckRow {
            rank: Some(r),
            cosine_img: ci,
            cosine_text: ct,
        });
    }
    let (ci, ct) = random_input_cosine(enc, store, train, test, seed)?;
    rows.push(BottleneckRow {
        rank: None,
        cosine_img: ci,
        cosine_text: ct,
    });
    Ok(rows)
}

/// Expected gradients: `attr_i = mean_{b, α} (x_i − b_i)·∂f/∂x_i (b + α(x − b))`
/// with α stratified over `n_interp` equal bins. `readout` maps a batch of
/// inputs (rows) to per-row values and per-row input gradients.
pub fn expected_gradients<F>(
    mut readout: F,
    x: &[f64],
    baselines: &Tensor,
    n_interp: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<(Vec<f64>, Tensor)>,
{
    let v = x.len();
    if baselines.cols() != v || baselines.rows() == 0 || n_interp == 0 {
        return Err(Error::invalid("expected_gradients", "need ≥ 1 baseline of matching width and ≥ 1 α"));
    }
    let nb = baselines.rows();
    let mut points = Tensor::zeros(nb * n_interp, v);
    for b in 0..nb {
        let base = baselines.row_slice(b);
        for k in 0..n_interp {
            let alpha = (k as f64 + rng.uniform()) / n_interp as f64;
            for i in 0..v {
                points.set(b * n_interp + k, i, base[i] + alpha * (x[i] - base[i]));
            }
        }
    }
    let (_, grads) = readout(&points)?;
    let mut attr = vec![0.0; v];
    for b in 0..nb {
        let base = baselines.row_slice(b);
        for k in 0..n_interp {
            let g = grads.row_slice(b * n_interp + k);
            for i in 0..v {
                attr[i] += (x[i] - base[i]) * g[i];
            }
        }
    }
    let s = 1.0 / (nb * n_interp) as f64;
    attr.iter_mut().for_each(|a| *a *= s);
    Ok(attr)
}

/// Batched readout `cosine(Pred_img(x), y_img)` and its input gradient.
/// With `routing`, every row reuses that voxel assignment instead of
/// routing itself, which makes the readout smooth in x.
pub fn cosine_readout<'a>(
    enc: &'a Encoder,
    store: &'a ParamStore,
    y_img: &'a [f64],
    routing: Option<&'a HierarchyAssignment>,
) -> impl FnMut(&Tensor) -> Result<(Vec<f64>, Tensor)> + 'a {
    move |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let fixed: Option<Vec<HierarchyAssignment>> = routing.map(|a| vec![a.clone(); x.rows()]);
        let opts = EncodeOptions {
            assignment: fixed.as_deref(),
            keep_probs: false,
        };
        let out = encode_batch(&mut tape, enc, store, xv, opts)?;
        let pred = tape.l2_normalize_rows(out.img)?;
        let n = y_img.iter().map(|a| a * a).sum::<f64>().sqrt();
        let yu: Vec<f64> = y_img.iter().map(|a| if n > 0.0 { a / n } else { 0.0 }).collect();
        let y: Vec<f64> = (0..x.rows()).flat_map(|_| yu.iter().copied()).collect();
        let yv = tape.constant(Tensor::matrix(x.rows(), yu.len(), y)?);
        let prod = tape.mul(pred, yv)?;
        let per_row = tape.sum_axis(prod, crate::tensor::Axis::Cols);
        let values = tape.value(per_row).data().to_vec();
        let total = tape.sum(per_row);
        let grad = tape.grad_of(total, xv)?;
        Ok((values, grad))
    }
}

/// Settings of one attribution run.
#[derive(Clone, Copy, Debug)]
pub struct AttributionConfig {
    pub n_baselines: usize,
    pub n_interp: usize,
    pub seed: u64,
    /// Hold routing at the input's own assignment along every path.
    pub fixed_routing: bool,
}

/// One item's attribution with the completeness check alongside.
#[derive(Clone, Debug)]
pub struct Attribution {
    pub attr: Vec<f64>,
    /// readout(x) − mean_b readout(b)
    pub gap: f64,
    /// Σ_i attr_i
    pub total: f64,
}

/// Baselines are dataset rows drawn uniformly from `pool`.
pub fn attribute(
    enc: &Encoder,
    store: &ParamStore,
    x: &[f64],
    y_img: &[f64],
    pool: &Dataset,
    cfg: &AttributionConfig,
) -> Result<Attribution> {
    if pool.is_empty() || cfg.n_baselines == 0 {
        return Err(Error::invalid("attribute", "need a non-empty baseline pool"));
    }
    let mut rng = RngStream::new(cfg.seed, 0x4154_5452);
    let idx: Vec<usize> = (0..cfg.n_baselines).map(|_| rng.below(pool.len() as u64) as usize).collect();
    let baselines = pool.select(&idx).x;
    let routing = if cfg.fixed_routing {
        Some(encode(x, enc, store)?.1)
    } else {
        None
    };
    let mut readout = cosine_readout(enc, store, y_img, routing.as_ref());
    let attr = expected_gradients(&mut readout, x, &baselines, cfg.n_interp, &mut rng)?;
    let (fx, _) = readout(&Tensor::from_rows(&[x]))?;
    let (fb, _) = readout(&baselines)?;
    let gap = fx[0] - fb.iter().sum::<f64>() / fb.len() as f64;
    let total = attr.iter().sum();
    Ok(Attribution { attr, gap, total })
}

#[derive(Clone, Debug)]
pub struct RoutingStats {
    /// Per level, per expert mean share of the level's attention mass;
    /// `None` for levels never selected.
    pub utilization: Vec<Option<Vec<f64>>>,
    /// T × L, row τ = P_T at router step τ.
    pub time_preference: Tensor,
    pub expected_level: Vec<f64>,
    /// Spearman(E[level], τ)
    pub spearman: f64,
    pub trace: Vec<StepTrace>,
}

pub fn routing_stats(model: &Stage2Model, store: &ParamStore, stacked: &[&Tensor], gen: &GenConfig) -> Result<RoutingStats> {
    let (_, trace) = model.sample(store, stacked, gen, true)?;
    let sizes = &model.sizes;
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&e| vec![0.0; e]).collect();
    let mut count = vec![0usize; sizes.len()];
    for row in &trace {
        let mut level_mass = vec![0.0; sizes.len()];
        let mut present = vec![false; sizes.len()];
        for &(l, _, m) in &row.mass {
            level_mass[l] += m;
            present[l] = true;
        }
        for &(l, e, m) in &row.mass {
            if level_mass[l] > 0.0 {
                acc[l][e] += m / level_mass[l];
            }
        }
        for l in 0..sizes.len() {
            if present[l] && level_mass[l] > 0.0 {
                count[l] += 1;
            }
        }
    }
    let utilization = acc
        .into_iter()
        .zip(&count)
        .map(|(a, &c)| (c > 0).then(|| a.into_iter().map(|x| x / c as f64).collect()))
        .collect();
    let time_preference = model.time_preference(store)?;
    let expected_level: Vec<f64> = (0..time_preference.rows())
        .map(|t| time_preference.row_slice(t).iter().enumerate().map(|(l, p)| l as f64 * p).sum())
        .collect();
    let taus: Vec<f64> = (0..expected_level.len()).map(|t| t as f64).collect();
    let rho = spearman(&expected_level, &taus)?;
    Ok(RoutingStats {
        utilization,
        time_preference,
        expected_level,
        spearman: rho,
        trace,
    })
}

/// Most frequent final-level expert of every voxel across samples (ties to
/// the lower id); voxels never routed get label `experts`.
pub fn modal_final_labels(assignments: &[HierarchyAssignment], voxels: usize, experts: usize) -> Vec<usize> {
    let mut counts = vec![vec![0usize; experts]; voxels];
    for a in assignments {
        for (i, l) in a.final_labels(voxels).into_iter().enumerate() {
            if let Some(j) = l {
                counts[i][j] += 1;
            }
        }
    }
    counts
        .iter()
        .map(|c| {
            let best = c.iter().enumerate().fold((experts, 0), |acc, (j, &n)| if n > acc.1 { (j, n) } else { acc });
            best.0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionRecovery {
    pub rand_index: f64,
    /// mean Rand index of random balanced partitions
    pub baseline: f64,
}

/// Rand index of the modal final-level partition over `data` against the
/// subject's planted groups.
pub fn partition_recovery(
    enc: &Encoder,
    store: &ParamStore,
    data: &Dataset,
    planted: &[usize],
    groups: usize,
    trials: usize,
    seed: u64,
) -> Result<PartitionRecovery> {
    let (_, assignments) = encode_all(enc, store, &data.x)?;
    let finest = enc.config.experts_at(enc.config.levels - 1);
    let labels = modal_final_labels(&assignments, data.voxels(), finest);
    Ok(PartitionRecovery {
        rand_index: rand_index(&labels, planted)?,
        baseline: random_partition_baseline(planted, groups, trials, seed)?,
    })
}

/// Held-out (image, text) cosine of a voxel → target ridge regression.
pub fn ridge_oracle(train: &Dataset, test: &Dataset, lambda: f64) -> Result<(f64, f64)> {
    let img = Ridge::fit(&train.x, &train.y_img, lambda)?.predict(&test.x)?;
    let text = Ridge::fit(&train.x, &train.y_text, lambda)?.predict(&test.x)?;
    Ok((mean_cos(&img, &test.y_img), mean_cos(&text, &test.y_text)))
}
