use crate::encoder::routing::assign_topk;
use crate::encoder::{Activation, Encoder, ExpertIds, HierarchyConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Routing of one level for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    /// expert → ascending voxel ids
    pub experts: Vec<Vec<usize>>,
    /// expert → voxel ids in placement order (the row order the expert saw)
    pub order: Vec<Vec<usize>>,
    /// v × e_l soft routing probabilities, zero outside each voxel's sibling
    /// group; present only when requested.
    pub probs: Option<Tensor>,
}

/// Per-level expert voxel sets for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyAssignment {
    pub levels: Vec<LevelAssignment>,
}

impl HierarchyAssignment {
    /// Expert label per voxel at `level`; `None` where the voxel was not routed.
    pub fn labels(&self, level: usize, voxels: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; voxels];
        for (j, set) in self.levels[level].experts.iter().enumerate() {
            for &i in set {
                out[i] = Some(j);
            }
        }
        out
    }

    pub fn final_labels(&self, voxels: usize) -> Vec<Option<usize>> {
        self.labels(self.levels.len() - 1, voxels)
    }
}

/// Per-level expert embeddings for one input: level l holds e_l × D matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertEmbeddingSet {
    pub img: Vec<Tensor>,
    pub text: Vec<Tensor>,
}

/// Mean over experts within each level, then mean over levels.
pub fn aggregate(set: &ExpertEmbeddingSet) -> (Vec<f64>, Vec<f64>) {
    let agg = |levels: &[Tensor]| {
        let d = levels[0].cols();
        let mut total = vec![0.0; d];
        for m in levels {
            let mut acc = m.row_slice(0).to_vec();
            for r in 1..m.rows() {
                acc.iter_mut().zip(m.row_slice(r)).for_each(|(a, x)| *a += x);
            }
            let s = 1.0 / m.rows() as f64;
            total.iter_mut().zip(&acc).for_each(|(t, a)| *t += a * s);
        }
        let s = 1.0 / levels.len() as f64;
        total.iter_mut().for_each(|t| *t *= s);
        total
    };
    (agg(&set.img), agg(&set.text))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions<'a> {
    /// Reuse these per-sample assignments instead of routing (for gradient checks).
    pub assignment: Option<&'a [HierarchyAssignment]>,
    pub keep_probs: bool,
}

/// Tape handles produced by a batched encoder pass.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub batch: usize,
    /// B × D aggregated predictions.
    pub img: Var,
    pub text: Var,
    /// Per level, per expert: B × D unit rows.
    pub expert_img: Vec<Vec<Var>>,
    pub expert_text: Vec<Vec<Var>>,
    /// Load-balancing loss averaged over the batch.
    pub load_balance: Var,
    pub assignments: Vec<HierarchyAssignment>,
}

impl EncodeOutput {
    /// Per-sample embedding values.
    pub fn embeddings(&self, tape: &Tape) -> Vec<ExpertEmbeddingSet> {
        let collect = |vars: &[Vec<Var>], b: usize| -> Vec<Tensor> {
            vars.iter()
                .map(|level| {
                    let rows: Vec<&[f64]> = level.iter().map(|&v| tape.value(v).row_slice(b)).collect();
                    Tensor::from_rows(&rows)
                })
                .collect()
        };
        (0..self.batch)
            .map(|b| ExpertEmbeddingSet {
                img: collect(&self.expert_img, b),
                text: collect(&self.expert_text, b),
            })
            .collect()
    }
}

/// Tape handles of one expert's output.
#[derive(Clone, Copy, Debug)]
pub struct ExpertOutput {
    /// rows × d_f per-voxel features
    pub o: Var,
    /// segments × D unit embeddings
    pub img: Var,
    pub text: Var,
}

/// Voxel-wise MLP over `x` followed by per-segment mean pooling and the two
/// normalized heads. `offsets` delimit the rows of each sample.
pub fn expert_forward(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &ExpertIds,
    activation: Activation,
    x: Var,
    offsets: &[usize],
) -> Result<ExpertOutput> {
    let p = |tape: &mut Tape, id| tape.param(store, id);
    let (w1, b1, w2, b2) = (p(tape, ids.w1), p(tape, ids.b1), p(tape, ids.w2), p(tape, ids.b2));
    let pre = tape.linear(x, w1, b1)?;
    let h = match activation {
        Activation::Gelu => tape.gelu(pre),
        Activation::Tanh => tape.tanh(pre),
    };
    let o = tape.linear(h, w2, b2)?;
    let pooled = tape.segment_sum(o, offsets, true)?;
    let (iw, ib) = (p(tape, ids.img_w), p(tape, ids.img_b));
    let (tw, tb) = (p(tape, ids.text_w), p(tape, ids.text_b));
    let img = tape.linear(pooled, iw, ib)?;
    let img = tape.l2_normalize_rows(img)?;
    let text = tape.linear(pooled, tw, tb)?;
    let text = tape.l2_normalize_rows(text)?;
    Ok(ExpertOutput { o, img, text })
}

/// Rows routed into one expert (or the root), grouped by sample.
struct Block {
    x: Var,
    offsets: Vec<usize>,
    /// global voxel id per row
    voxels: Vec<usize>,
}

/// Batched encoder pass. `x` is B × v voxel activity.
pub fn encode_batch(
    tape: &mut Tape,
    enc: &Encoder,
    store: &ParamStore,
    x: Var,
    opts: EncodeOptions,
) -> Result<EncodeOutput> {
    let cfg = &enc.config;
    let v = enc.voxels;
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 2 || xs[1] != v {
        return Err(Error::shape("encode", format!("input {xs:?}, expected B × {v}")));
    }
    let batch = xs[0];
    if let Some(a) = opts.assignment {
        if a.len() != batch || a.iter().any(|h| h.levels.len() != cfg.levels) {
            return Err(Error::invalid("encode", "assignment override does not match batch"));
        }
    }
    let col = tape.reshape(x, vec![batch * v, 1])?;
    let u = tape.param(store, enc.u);
    let uidx: Vec<usize> = (0..batch).flat_map(|_| 0..v).collect();
    let ug = tape.gather_rows(u, &uidx)?;
    let x0 = tape.concat_cols(&[col, ug])?;
    let mut parents = vec![Block {
        x: x0,
        offsets: (0..=batch).map(|b| b * v).collect(),
        voxels: uidx,
    }];

    let mut assignments: Vec<HierarchyAssignment> = (0..batch)
        .map(|_| HierarchyAssignment { levels: Vec::new() })
        .collect();
    let mut expert_img = Vec::new();
    let mut expert_text = Vec::new();
    let mut balance_terms = Vec::new();
    let mut pos = vec![usize::MAX; v];

    for l in 0..cfg.levels {
        let e = cfg.experts_at(l);
        let w = tape.param(store, enc.routers[l]);
        let mut level_sets: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); e]; batch];
        let mut level_probs: Vec<Option<Tensor>> = (0..batch)
            .map(|_| opts.keep_probs.then(|| Tensor::zeros(v, e)))
            .collect();
        let mut fractions = Vec::new();
        let mut children: Vec<Block> = Vec::with_capacity(e);
        let mut level_img = Vec::with_capacity(e);
        let mut level_text = Vec::with_capacity(e);
        for (pi, parent) in parents.iter().enumerate() {
            let kids = cfg.children(l, pi);
            let br = kids.len();
            let wp = if br == e {
                w
            } else {
                tape.slice_cols(w, kids.start, br)?
            };
            let logits = tape.matmul(parent.x, wp)?;
            let probs = tape.softmax_rows(logits)?;
            fractions.push(tape.segment_sum(probs, &parent.offsets, false)?);

            // child → per-sample local rows in placement order
            let mut rows: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(batch); br];
            for b in 0..batch {
                let (lo, hi) = (parent.offsets[b], parent.offsets[b + 1]);
                let seg_voxels = &parent.voxels[lo..hi];
                let pv = tape.value(probs);
                if let Some(pt) = level_probs[b].as_mut() {
                    for (r, &vox) in seg_voxels.iter().enumerate() {
                        for c in 0..br {
                            pt.set(vox, kids.start + c, pv.get(lo + r, c));
                        }
                    }
                }
                let local: Vec<Vec<usize>> = match opts.assignment {
                    Some(over) => {
                        for (r, &vox) in seg_voxels.iter().enumerate() {
                            pos[vox] = r;
                        }
                        let res = kids
                            .clone()
                            .map(|c| {
                                over[b].levels[l].order[c]
                                    .iter()
                                    .map(|&vox| match pos.get(vox) {
                                        Some(&r) if r != usize::MAX => Ok(r),
                                        _ => Err(Error::invalid(
                                            "encode",
                                            format!("override routes voxel {vox} outside its parent"),
                                        )),
                                    })
                                    .collect::<Result<Vec<usize>>>()
                            })
                            .collect::<Result<Vec<_>>>();
                        for &vox in seg_voxels {
                            pos[vox] = usize::MAX;
                        }
                        res?
                    }
                    None => {
                        let seg = Tensor::matrix(hi - lo, br, pv.data()[lo * br..hi * br].to_vec())?;
                        assign_topk(&seg, cfg.capacity)?
                    }
                };
                for (c, lr) in local.into_iter().enumerate() {
                    level_sets[b][kids.start + c] = lr.iter().map(|&r| seg_voxels[r]).collect();
                    rows[c].push(lr);
                }
            }

            for (c, per_sample) in rows.into_iter().enumerate() {
                let j = kids.start + c;
                let mut idx = Vec::new();
                let mut offsets = vec![0];
                for (b, lr) in per_sample.iter().enumerate() {
                    if lr.is_empty() {
                        return Err(Error::invalid(
                            "expert_forward",
                            format!("level {l} expert {j} received no voxels"),
                        ));
                    }
                    idx.extend(lr.iter().map(|&r| parent.offsets[b] + r));
                    offsets.push(idx.len());
                }
                let xc = tape.gather_rows(parent.x, &idx)?;
                let out = expert_forward(tape, store, &enc.experts[l][j], cfg.activation, xc, &offsets)?;
                level_img.push(out.img);
                level_text.push(out.text);
                children.push(Block {
                    x: out.o,
                    offsets,
                    voxels: idx.iter().map(|&r| parent.voxels[r]).collect(),
                });
            }
        }

        // soft fractions f_j per sample over the voxels routed into this level
        let routed: Vec<f64> = (0..batch)
            .map(|b| {
                let n: usize = parents.iter().map(|p| p.offsets[b + 1] - p.offsets[b]).sum();
                1.0 / n as f64
            })
            .collect();
        let f = if fractions.len() == 1 {
            fractions[0]
        } else {
            tape.concat_cols(&fractions)?
        };
        let inv = tape.constant(Tensor::matrix(batch, 1, routed)?);
        let f = tape.mul(f, inv)?;
        let dev = tape.affine_scalar(f, 1.0, -1.0 / e as f64);
        let sq = tape.mul(dev, dev)?;
        balance_terms.push(tape.sum(sq));

        for (b, sets) in level_sets.into_iter().enumerate() {
            let order = sets.clone();
            let experts = sets
                .into_iter()
                .map(|mut s| {
                    s.sort_unstable();
                    s
                })
                .collect();
            assignments[b].levels.push(LevelAssignment {
                experts,
                order,
                probs: level_probs[b].take(),
            });
        }
        expert_img.push(level_img);
        expert_text.push(level_text);
        parents = children;
    }

    let img = aggregate_vars(tape, &expert_img)?;
    let text = aggregate_vars(tape, &expert_text)?;
    let mut lb = balance_terms[0];
    for &t in &balance_terms[1..] {
        lb = tape.add(lb, t)?;
    }
    let load_balance = tape.scale(lb, 1.0 / batch as f64);
    Ok(EncodeOutput {
        batch,
        img,
        text,
        expert_img,
        expert_text,
        load_balance,
        assignments,
    })
}

fn aggregate_vars(tape: &mut Tape, levels: &[Vec<Var>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for level in levels {
        let mut acc = level[0];
        for &v in &level[1..] {
            acc = tape.add(acc, v)?;
        }
        let mean = tape.scale(acc, 1.0 / level.len() as f64);
        total = Some(match total {
            None => mean,
            Some(t) => tape.add(t, mean)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("aggregate", "no levels"))?;
    Ok(tape.scale(total, 1.0 / levels.len() as f64))
}

/// Encode one recording.
pub fn encode(
    f: &[f64],
    enc: &Encoder,
    store: &ParamStore,
) -> Result<(ExpertEmbeddingSet, HierarchyAssignment)> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, f.len(), f.to_vec())?);
    let out = encode_batch(
        &mut tape,
        enc,
        store,
        x,
        EncodeOptions {
            assignment: None,
            keep_probs: true,
        },
    )?;
    let set = out.embeddings(&tape).pop().expect("one sample");
    Ok((set, out.assignments.into_iter().next().expect("one sample")))
}

/// Check the c_f = 1 routing invariants: at every level the expert sets are
/// disjoint and cover all voxels, each child's set lies inside its parent's,
/// and a parent's n voxels split into ⌊n/b⌋ or ⌊n/b⌋+1 per child with
/// exactly n mod b children holding the extra one.
pub fn validate_assignment(h: &HierarchyAssignment, cfg: &HierarchyConfig, v: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::invalid("validate_assignment", msg));
    if h.levels.len() != cfg.levels {
        return bad(format!("{} levels, expected {}", h.levels.len(), cfg.levels));
    }
    let mut parent_of = vec![0usize; v];
    let mut parent_sizes = vec![v];
    for (l, level) in h.levels.iter().enumerate() {
        if level.experts.len() != cfg.experts_at(l) {
            return bad(format!("level {l} has {} experts", level.experts.len()));
        }
        let mut seen = vec![false; v];
        for (j, set) in level.experts.iter().enumerate() {
            for &i in set {
                if i >= v || seen[i] {
                    return bad(format!("voxel {i} repeated or out of range at level {l}"));
                }
                seen[i] = true;
                if l > 0 && !cfg.children(l, parent_of[i]).contains(&j) {
                    return bad(format!("voxel {i} leaves its parent at level {l}"));
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return bad(format!("level {l} does not cover every voxel"));
        }
        for (p, &n) in parent_sizes.iter().enumerate() {
            let kids = cfg.children(l, p);
            let b = kids.len();
            let sizes: Vec<usize> = kids.map(|j| level.experts[j].len()).collect();
            let big = sizes.iter().filter(|&&s| s == n / b + 1).count();
            if sizes.iter().any(|&s| s != n / b && s != n / b + 1) || (n % b != 0 && big != n % b) {
                return bad(format!("level {l} parent {p}: sizes {sizes:?} for {n} voxels"));
            }
        }
        for (j, set) in level.experts.iter().enumerate() {
            for &i in set {
                parent_of[i] = j;
            }
        }
        parent_sizes = level.experts.iter().map(Vec::len).collect();
    }
    Ok(())
}
