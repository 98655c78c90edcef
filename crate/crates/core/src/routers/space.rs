use serde::{Deserialize, Serialize};

use crate::encoder::ExpertEmbeddingSet;
use crate::error::{Error, Result};
use crate::routers::time::LevelSelection;
use crate::tensor::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpaceRouterConfig {
    pub d_a: usize,
    pub d_c: usize,
}

impl Default for SpaceRouterConfig {
    fn default() -> Self {
        Self { d_a: 16, d_c: 16 }
    }
}

#[derive(Clone, Debug)]
pub struct SpaceRouter {
    pub config: SpaceRouterConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl SpaceRouter {
    pub fn init(
        config: SpaceRouterConfig,
        d_z: usize,
        d_embed: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if config.d_a == 0 || config.d_c == 0 {
            return Err(Error::Config("space router widths must be positive".into()));
        }
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        let wq = store.add("space.wq", rng.normal_tensor(d_z, config.d_a, s(d_z)));
        let wk = store.add("space.wk", rng.normal_tensor(d_embed, config.d_a, s(d_embed)));
        let wv = store.add("space.wv", rng.normal_tensor(d_embed, config.d_c, s(d_embed)));
        Ok(Self { config, wq, wk, wv })
    }

    pub fn bind(config: SpaceRouterConfig, d_z: usize, d_embed: usize, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            wq: store.lookup("space.wq", &[d_z, config.d_a])?,
            wk: store.lookup("space.wk", &[d_embed, config.d_a])?,
            wv: store.lookup("space.wv", &[d_embed, config.d_c])?,
            config,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv]
    }
}

/// Scaled dot-product attention restricted to matching blocks: query rows
/// `[q_off[b], q_off[b+1])` attend only to key rows `[k_off[b], k_off[b+1])`.
/// Returns the output and the attention matrix.
pub fn block_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    q_off: &[usize],
    k_off: &[usize],
) -> Result<(Var, Var)> {
    if q_off.len() != k_off.len() {
        return Err(Error::shape("attention", "query and key block counts differ"));
    }
    let d = tape.value(q).cols() as f64;
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / d.sqrt());
    let s = if q_off.len() > 2 {
        let (nq, nk) = (tape.value(q).rows(), tape.value(k).rows());
        let mut mask = Tensor::filled(nq, nk, -1e300);
        for b in 0..q_off.len() - 1 {
            for i in q_off[b]..q_off[b + 1] {
                for j in k_off[b]..k_off[b + 1] {
                    mask.set(i, j, 0.0);
                }
            }
        }
        let m = tape.constant(mask);
        tape.add(s, m)?
    } else {
        s
    };
    let a = tape.softmax_rows(s)?;
    Ok((tape.matmul(a, v)?, a))
}

/// Per-sample embedding rows, level-major: for each level, e_l image rows then e_l text rows.
pub fn stack_embeddings(set: &ExpertEmbeddingSet) -> Tensor {
    let mut rows: Vec<&[f64]> = Vec::new();
    for (img, text) in set.img.iter().zip(&set.text) {
        rows.extend((0..img.rows()).map(|r| img.row_slice(r)));
        rows.extend((0..text.rows()).map(|r| text.row_slice(r)));
    }
    Tensor::from_rows(&rows)
}

/// Embedding rows chosen for a batch, stacked over samples.
#[derive(Clone, Debug)]
pub struct Selection {
    pub rows: Tensor,
    pub offsets: Vec<usize>,
    /// level of each row
    pub level: Vec<usize>,
    /// expert index (within its level) of each row
    pub expert: Vec<usize>,
    /// Soft mode: rows are scaled by the sample's P_T of their level.
    pub soft: bool,
}

/// Pick E_sel rows per sample. `stacked[b]` is the level-major layout of
/// [`stack_embeddings`]; `sizes[l]` = e_l.
pub fn build_selection(stacked: &[&Tensor], sizes: &[usize], choice: &[LevelSelection]) -> Result<Selection> {
    if stacked.len() != choice.len() || stacked.is_empty() {
        return Err(Error::shape("build_selection", "one choice per sample required"));
    }
    let mut starts = vec![0];
    for &e in sizes {
        starts.push(starts.last().unwrap() + 2 * e);
    }
    let soft = matches!(choice[0], LevelSelection::Soft(_));
    let mut data = Vec::new();
    let (mut offsets, mut level, mut expert) = (vec![0], Vec::new(), Vec::new());
    for (e_all, ch) in stacked.iter().zip(choice) {
        if e_all.rows() != *starts.last().unwrap() {
            return Err(Error::shape("build_selection", "embedding rows do not match level sizes"));
        }
        let lv: Vec<usize> = match ch {
            LevelSelection::Soft(_) if soft => (0..sizes.len()).collect(),
            LevelSelection::Level(l) if !soft && *l < sizes.len() => vec![*l],
            _ => return Err(Error::invalid("build_selection", "mixed or out-of-range level choices")),
        };
        for l in lv {
            for r in starts[l]..starts[l + 1] {
                data.extend_from_slice(e_all.row_slice(r));
                level.push(l);
                expert.push((r - starts[l]) % sizes[l]);
            }
        }
        offsets.push(level.len());
    }
    let d = stacked[0].cols();
    Ok(Selection {
        rows: Tensor::matrix(level.len(), d, data)?,
        offsets,
        level,
        expert,
        soft,
    })
}

/// Batched space router. `z` is (B·n_z) × d_z, `p_time` the B × L time
/// weights (used in soft mode). Returns C ((B·n_z) × d_c) and the attention.
pub fn space_condition_batch(
    tape: &mut Tape,
    store: &ParamStore,
    router: &SpaceRouter,
    z: Var,
    n_z: usize,
    sel: &Selection,
    p_time: Option<Var>,
) -> Result<(Var, Var)> {
    let batch = sel.offsets.len() - 1;
    if tape.value(z).rows() != batch * n_z {
        return Err(Error::shape("space_condition", "latent rows do not match batch"));
    }
    let e_rows = tape.constant(sel.rows.clone());
    let e_sel = if sel.soft {
        let p = p_time.ok_or_else(|| Error::invalid("space_condition", "soft mode needs time weights"))?;
        let levels = tape.value(p).cols();
        let flat = tape.reshape(p, vec![batch * levels, 1])?;
        let idx: Vec<usize> = (0..batch)
            .flat_map(|b| sel.level[sel.offsets[b]..sel.offsets[b + 1]].iter().map(move |&l| b * levels + l))
            .collect();
        let scale = tape.gather_rows(flat, &idx)?;
        tape.mul(e_rows, scale)?
    } else {
        e_rows
    };
    let wq = tape.param(store, router.wq);
    let wk = tape.param(store, router.wk);
    let wv = tape.param(store, router.wv);
    let q = tape.matmul(z, wq)?;
    let k = tape.matmul(e_sel, wk)?;
    let v = tape.matmul(e_sel, wv)?;
    let q_off: Vec<usize> = (0..=batch).map(|b| b * n_z).collect();
    block_attention(tape, q, k, v, &q_off, &sel.offsets)
}

/// `C = softmax((z Ŵ_Q)(E Ŵ_K)ᵀ/√d_a)(E Ŵ_V)` for one latent and one E_sel.
pub fn space_condition(z: &Tensor, e_sel: &Tensor, router: &SpaceRouter, store: &ParamStore) -> Result<Tensor> {
    if e_sel.rows() == 0 || e_sel.is_empty() {
        return Err(Error::invalid("space_condition", "empty E_sel"));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let sel = Selection {
        rows: e_sel.clone(),
        offsets: vec![0, e_sel.rows()],
        level: vec![0; e_sel.rows()],
        expert: (0..e_sel.rows()).collect(),
        soft: false,
    };
    let (c, _) = space_condition_batch(&mut tape, store, router, zv, z.rows(), &sel, None)?;
    Ok(tape.value(c).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn router(d_z: usize, d_e: usize, cfg: SpaceRouterConfig, seed: u64) -> (SpaceRouter, ParamStore) {
        let mut store = ParamStore::new();
        let r = SpaceRouter::init(cfg, d_z, d_e, &mut store, &mut RngStream::new(seed, 0)).unwrap();
        (r, store)
    }

    #[test]
    fn single_key_returns_its_value() {
        let (r, store) = router(3, 4, SpaceRouterConfig::default(), 1);
        let mut rng = RngStream::new(2, 0);
        let z = rng.normal_tensor(5, 3, 1.0);
        let e = rng.normal_tensor(1, 4, 1.0);
        let c = space_condition(&z, &e, &r, &store).unwrap();
        let v = crate::tensor::matmul(&e, store.get(r.wv)).unwrap();
        for t in 0..5 {
            for (a, b) in c.row_slice(t).iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_entries_return_shared_value() {
        let (r, store) = router(3, 4, SpaceRouterConfig::default(), 5);
        let mut rng = RngStream::new(6, 0);
        let z = rng.normal_tensor(4, 3, 1.0);
        let row = rng.normals(4);
        let e = Tensor::from_rows(&[&row, &row, &row]);
        let c = space_condition(&z, &e, &r, &store).unwrap();
        let v = crate::tensor::matmul(&Tensor::row(row), store.get(r.wv)).unwrap();
        for t in 0..4 {
            for (a, b) in c.row_slice(t).iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_attention_hand_value() {
        // E rows [key, value]: Ŵ_K reads column 0, Ŵ_V column 1. Query 1 gives
        // logits [0, ln 3] and values [10, 20].
        let cfg = SpaceRouterConfig { d_a: 1, d_c: 1 };
        let (r, mut store) = router(1, 2, cfg, 0);
        store.assign(r.wq, Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        store.assign(r.wk, Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        store.assign(r.wv, Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
        let e = Tensor::from_rows(&[&[0.0, 10.0], &[3f64.ln(), 20.0]]);
        let z = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let c = space_condition(&z, &e, &r, &store).unwrap();
        assert!((c.item() - 17.5).abs() < 1e-12, "{}", c.item());
    }

    #[test]
    fn block_attention_rows_sum_to_one_and_stay_in_block() {
        let mut rng = RngStream::new(1, 0);
        let mut tape = Tape::new();
        let q = tape.constant(rng.normal_tensor(4, 3, 1.0));
        let k = tape.constant(rng.normal_tensor(5, 3, 1.0));
        let v = tape.constant(rng.normal_tensor(5, 2, 1.0));
        let (_, a) = block_attention(&mut tape, q, k, v, &[0, 2, 4], &[0, 3, 5]).unwrap();
        let a = tape.value(a);
        for i in 0..4 {
            let s: f64 = a.row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..5 {
                let inside = (i < 2) == (j < 3);
                if !inside {
                    assert_eq!(a.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn selection_layouts() {
        let sizes = [2, 4];
        let e = RngStream::new(0, 0).normal_tensor(12, 3, 1.0);
        let s = build_selection(&[&e, &e], &sizes, &[LevelSelection::Level(1), LevelSelection::Level(0)]).unwrap();
        assert_eq!(s.offsets, vec![0, 8, 12]);
        assert_eq!(s.rows.row_slice(0), e.row_slice(4));
        assert_eq!(&s.expert[..8], &[0, 1, 2, 3, 0, 1, 2, 3]);
        let soft = LevelSelection::Soft(vec![0.5, 0.5]);
        let s = build_selection(&[&e], &sizes, &[soft]).unwrap();
        assert_eq!(s.level, vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert!(build_selection(&[&e], &sizes, &[LevelSelection::Level(2)]).is_err());
    }
}
