use serde::{Deserialize, Serialize};

use crate::encoder::EncodeOutput;
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Axis, Tape, Tensor, Var};

/// Σ_l Σ_j (f_j − 1/e_l)² with f_j the mean of column j of that level's P.
pub fn load_balance_value(probs: &[Tensor]) -> f64 {
    probs
        .iter()
        .map(|p| {
            let (n, e) = (p.rows() as f64, p.cols());
            (0..e)
                .map(|j| {
                    let f = (0..p.rows()).map(|i| p.get(i, j)).sum::<f64>() / n;
                    (f - 1.0 / e as f64).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Tape version of [`load_balance_value`] for per-level probability nodes.
pub fn load_balance_loss(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in probs {
        let e = tape.value(p).cols();
        let f = tape.mean_axis(p, Axis::Rows);
        let dev = tape.affine_scalar(f, 1.0, -1.0 / e as f64);
        let sq = tape.mul(dev, dev)?;
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    total.ok_or_else(|| Error::invalid("load_balance_loss", "no levels"))
}

/// Bidirectional soft-target InfoNCE. `pred` is normalized here; `gt` rows
/// must already be unit norm.
pub fn contrastive_loss(tape: &mut Tape, pred: Var, gt: Var, tau: f64, tau_t: f64) -> Result<Var> {
    let b = tape.value(pred).rows();
    let g = tape.value(gt).clone();
    if g.rows() != b {
        return Err(Error::shape("contrastive_loss", "batch sizes differ"));
    }
    for r in 0..b {
        if g.row_slice(r).iter().all(|&x| x == 0.0) {
            return Err(Error::invalid("contrastive_loss", "zero-norm target row"));
        }
    }
    let mut sim = Tensor::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let d: f64 = g.row_slice(i).iter().zip(g.row_slice(j)).map(|(x, y)| x * y).sum();
            sim.set(i, j, d / tau_t);
        }
    }
    let target = tape.constant(softmax_rows(&sim)?);
    let pn = tape.l2_normalize_rows(pred)?;
    let fwd = tape.matmul_nt(pn, gt)?;
    let fwd = tape.scale(fwd, 1.0 / tau);
    let back = tape.matmul_nt(gt, pn)?;
    let back = tape.scale(back, 1.0 / tau);
    let mut total = None;
    for logits in [fwd, back] {
        let ls = tape.log_softmax_rows(logits)?;
        let prod = tape.mul(ls, target)?;
        let s = tape.sum(prod);
        let term = tape.scale(s, -1.0 / b as f64);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(tape.scale(total.expect("two directions"), 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Weights {
    pub mse: f64,
    pub contrastive: f64,
    pub balance: f64,
    pub tau: f64,
    pub tau_t: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            contrastive: 0.33,
            balance: 0.1,
            tau: 0.1,
            tau_t: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub total: Var,
    pub mse: Var,
    pub contrastive: Var,
    pub balance: Var,
}

/// Weighted MSE + contrastive (both heads) + load balancing.
pub fn stage1_loss(
    tape: &mut Tape,
    out: &EncodeOutput,
    gt_img: Var,
    gt_text: Var,
    w: &Stage1Weights,
) -> Result<Stage1Terms> {
    let mut mse = None;
    let mut con = None;
    for (pred, gt) in [(out.img, gt_img), (out.text, gt_text)] {
        let d = tape.sub(pred, gt)?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean(sq);
        mse = Some(match mse {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
        let c = contrastive_loss(tape, pred, gt, w.tau, w.tau_t)?;
        con = Some(match con {
            None => c,
            Some(t) => tape.add(t, c)?,
        });
    }
    let (mse, contrastive) = (mse.expect("two heads"), con.expect("two heads"));
    let a = tape.scale(mse, w.mse);
    let b = tape.scale(contrastive, w.contrastive);
    let c = tape.scale(out.load_balance, w.balance);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(Stage1Terms {
        total,
        mse,
        contrastive,
        balance: out.load_balance,
    })
}
