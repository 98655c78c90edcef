use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_rows, Tensor};

/// Per-voxel router input: row i is `[F_i, U_i]`.
pub fn voxel_features(f: &[f64], u: &Tensor) -> Result<Tensor> {
    if u.rows() != f.len() {
        return Err(Error::shape(
            "voxel_features",
            format!("{} activities vs {} embedding rows", f.len(), u.rows()),
        ));
    }
    let du = u.cols();
    let mut data = Vec::with_capacity(f.len() * (1 + du));
    for (i, &fi) in f.iter().enumerate() {
        data.push(fi);
        data.extend_from_slice(u.row_slice(i));
    }
    Tensor::matrix(f.len(), 1 + du, data)
}

/// Affinities `A = X·W_r` and routing probabilities `P = softmax_rows(A)`.
pub fn router_affinity(x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
    let a = matmul(x, w)?;
    let p = softmax_rows(&a)?;
    Ok((a, p))
}

/// Capacity-limited greedy routing of `n` voxels to `e` experts.
///
/// Each expert takes `k = ⌊n/e·c_f⌋` voxels. (voxel, expert) pairs are visited
/// by descending probability (ties: lower voxel, then lower expert); a voxel is
/// placed once and an expert closes at capacity. When `c_f = 1` the `n mod e`
/// leftovers are placed in a second pass over the same order, each expert
/// taking at most one extra. Returned lists hold voxel rows in placement order.
pub fn assign_topk(p: &Tensor, capacity: f64) -> Result<Vec<Vec<usize>>> {
    let (n, e) = (p.rows(), p.cols());
    if e > n {
        return Err(Error::invalid(
            "assign_topk",
            format!("{e} experts for {n} voxels"),
        ));
    }
    let k = ((n as f64 / e as f64) * capacity).floor() as usize;
    if k == 0 {
        return Err(Error::invalid("assign_topk", "capacity rounds to zero voxels"));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..e).map(move |j| (i, j))).collect();
    let d = p.data();
    pairs.sort_by(|&(i1, j1), &(i2, j2)| {
        d[i2 * e + j2]
            .total_cmp(&d[i1 * e + j1])
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });
    let mut placed = vec![false; n];
    let mut sets: Vec<Vec<usize>> = vec![Vec::with_capacity(k + 1); e];
    let pass = |limit: usize, placed: &mut [bool], sets: &mut [Vec<usize>]| {
        for &(i, j) in &pairs {
            if !placed[i] && sets[j].len() < limit {
                placed[i] = true;
                sets[j].push(i);
            }
        }
    };
    pass(k, &mut placed, &mut sets);
    if capacity >= 1.0 {
        pass(k + 1, &mut placed, &mut sets);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn features_prepend_activity() {
        let u = Tensor::zeros(3, 2);
        let x = voxel_features(&[1.0, 2.0, 3.0], &u).unwrap();
        assert_eq!(x.shape(), &[3, 3]);
        assert_eq!(x.row_slice(1), &[2.0, 0.0, 0.0]);
        assert!(voxel_features(&[1.0], &u).is_err());
    }

    #[test]
    fn affinity_hand_values() {
        let x = Tensor::from_rows(&[&[1.0], &[-1.0]]);
        let w = Tensor::from_rows(&[&[2.0, 0.0]]);
        let (a, p) = router_affinity(&x, &w).unwrap();
        assert_eq!(a.data(), &[2.0, 0.0, -2.0, 0.0]);
        assert!((p.get(0, 0) - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((p.get(0, 1) - 0.119_202_922_022_117_7).abs() < 1e-12);
        let (_, pz) = router_affinity(&x, &Tensor::zeros(1, 2)).unwrap();
        assert!(pz.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn topk_without_conflict() {
        let p = Tensor::from_rows(&[&[0.9, 0.1], &[0.8, 0.2], &[0.1, 0.9], &[0.2, 0.8]]);
        let s = assign_topk(&p, 1.0).unwrap();
        assert_eq!(sorted(s[0].clone()), vec![0, 1]);
        assert_eq!(sorted(s[1].clone()), vec![2, 3]);
    }

    #[test]
    fn topk_greedy_resolves_conflicts() {
        let p = Tensor::from_rows(&[&[0.9, 0.1], &[0.85, 0.15], &[0.4, 0.6], &[0.45, 0.55]]);
        let s = assign_topk(&p, 1.0).unwrap();
        assert_eq!(s[0], vec![0, 1]);
        assert_eq!(sorted(s[1].clone()), vec![2, 3]);
    }

    #[test]
    fn remainder_spills_to_one_expert() {
        let p = Tensor::from_rows(&[
            &[0.9, 0.1],
            &[0.7, 0.3],
            &[0.6, 0.4],
            &[0.2, 0.8],
            &[0.3, 0.7],
        ]);
        let s = assign_topk(&p, 1.0).unwrap();
        let mut sizes: Vec<usize> = s.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 3]);
        let all = sorted(s.concat());
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        // voxel 2 is left after both experts fill; it prefers expert 0.
        assert_eq!(sorted(s[0].clone()), vec![0, 1, 2]);
    }

    #[test]
    fn ties_break_toward_lower_voxel() {
        let p = Tensor::filled(4, 2, 0.5);
        let s = assign_topk(&p, 1.0).unwrap();
        assert_eq!(s[0], vec![0, 1]);
        assert_eq!(s[1], vec![2, 3]);
    }

    #[test]
    fn more_experts_than_voxels_rejected() {
        assert!(assign_topk(&Tensor::filled(2, 3, 1.0 / 3.0), 1.0).is_err());
    }
}
