use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1e-8, |numeric|)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar node. Every element of every parameter is perturbed.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&l| tape.grad_of(out, l))
        .collect::<Result<_>>()?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut work = params.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for p in 0..params.len() {
        for j in 0..params[p].len() {
            let orig = params[p].data()[j];
            work[p].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[j];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / numeric.abs().max(1e-8));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        checked,
    })
}

/// `grad_check` for losses that read their weights from a `ParamStore`:
/// every element of every tensor in `ids` is perturbed in a private copy.
/// Uses the fourth-order central stencil
/// (f(−2h) − 8f(−h) + 8f(h) − f(2h)) / 12h, so `step` can be large enough
/// to keep roundoff out of whole-model losses.
pub fn grad_check_store<F>(f: F, store: &ParamStore, ids: &[ParamId], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    for id in work.ids().collect::<Vec<_>>() {
        work.set_frozen(id, !ids.contains(&id));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, &work)?;
    let grads = tape.backward(out)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        Ok(t.value(o).item())
    };
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for &id in ids {
        let zero = Tensor::zeros_like(store.get(id));
        let analytic = grads.get(id).unwrap_or(&zero).clone();
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            let mut at = |k: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[j] = orig + k * step;
                eval(&work)
            };
            let (m2, m1, p1, p2) = (at(-2.0)?, at(-1.0)?, at(1.0)?, at(2.0)?);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step);
            let abs = (analytic.data()[j] - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / numeric.abs().max(1e-8));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Axis, RngStream};

    fn random(rng: &mut RngStream, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn affine_map_is_exact() {
        let mut rng = RngStream::new(5, 0);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 4, 2);
        let b = random(&mut rng, 1, 2);
        let rep = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                Ok(t.sum(y))
            },
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-9, "{rep:?}");
    }

    #[test]
    fn store_variant_agrees_with_leaf_variant() {
        let mut rng = RngStream::new(6, 0);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut rng, 3, 2));
        let x = random(&mut rng, 4, 3);
        let rep = grad_check_store(
            |t, s| {
                let xv = t.constant(x.clone());
                let wv = t.param(s, w);
                let y = t.matmul(xv, wv)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &store,
            &[w],
            1e-4,
        )
        .unwrap();
        assert_eq!(rep.checked, 6);
        assert!(rep.max_rel_error <= 1e-8, "{rep:?}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let rep = grad_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                Ok(t.sum(z))
            },
            &[Tensor::row(vec![1.0, -1.0, 0.5])],
            1e-6,
        )
        .unwrap();
        assert_eq!(rep.max_abs_error, 0.0);
    }

    /// Exercises every op on one random graph.
    fn composite(t: &mut Tape, v: &[Var]) -> Result<Var> {
        let (x, w, b, e) = (v[0], v[1], v[2], v[3]);
        let h = t.linear(x, w, b)?; // 4x3
        let g = t.gelu(h);
        let th = t.tanh(g);
        let sm = t.softmax_rows(th)?;
        let ls = t.log_softmax_rows(h)?;
        let m = t.mul(sm, ls)?;
        let gathered = t.gather_rows(m, &[3, 0, 0, 2])?;
        let sl = t.slice_cols(gathered, 1, 2)?;
        let cat = t.concat_cols(&[sl, x])?; // 4 x 4
        let nrm = t.l2_normalize_rows(cat)?;
        let seg = t.segment_sum(nrm, &[0, 1, 4], true)?; // 2 x 7
        let seg2 = t.segment_sum(nrm, &[0, 3, 4], false)?;
        let rows = t.concat_rows(&[seg, seg2])?; // 4 x 4
        let flat = t.reshape(rows, vec![2, 8])?;
        let rows = t.reshape(flat, vec![4, 4])?;
        let ee = t.exp(e); // 4 x 1
        let col = t.mul(rows, ee)?;
        let nt = t.matmul_nt(col, rows)?; // 4 x 4
        let s_ax = t.sum_axis(nt, Axis::Rows);
        let sq = t.mul(s_ax, s_ax)?;
        let pos = t.affine_scalar(sq, 0.5, 1.0);
        let lg = t.log(pos)?;
        let m_ax = t.mean_axis(nt, Axis::Cols);
        let a = t.sum(lg);
        let bsum = t.mean(m_ax);
        let diff = t.sub(a, bsum)?;
        Ok(diff)
    }

    #[test]
    fn composite_of_all_ops_matches_finite_differences() {
        for seed in 0..50 {
            let mut rng = RngStream::new(seed, 11);
            let params = vec![
                random(&mut rng, 4, 2),
                random(&mut rng, 2, 3),
                random(&mut rng, 1, 3),
                random(&mut rng, 4, 1),
            ];
            let rep = grad_check(composite, &params, 1e-6).unwrap();
            assert!(rep.max_rel_error <= 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = RngStream::new(77, 0);
        let x0 = random(&mut rng, 3, 3);
        let grad = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let f = {
                let y = t.tanh(x);
                t.sum(y)
            };
            let g = {
                let y = t.mul(x, x).unwrap();
                let s = t.softmax_rows(y).unwrap();
                let l = t.log(s).unwrap();
                t.sum(l)
            };
            let out = match which {
                0 => f,
                1 => g,
                _ => {
                    let a = t.scale(f, 2.5);
                    let b = t.scale(g, -0.75);
                    t.add(a, b).unwrap()
                }
            };
            t.grad_of(out, x).unwrap()
        };
        let (gf, gg, gc) = (grad(0), grad(1), grad(2));
        for j in 0..9 {
            let expect = 2.5 * gf.data()[j] - 0.75 * gg.data()[j];
            assert!((gc.data()[j] - expect).abs() < 1e-12);
        }
    }
}
