use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Cosine similarity; a zero vector gives 0 by convention.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean row-wise cosine of two n × D matrices.
pub fn mean_cosine(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.rows() == 0 {
        return Err(Error::shape("mean_cosine", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let s: f64 = (0..pred.rows()).map(|r| cosine(pred.row_slice(r), gt.row_slice(r))).sum();
    Ok(s / pred.rows() as f64)
}

pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("mse", format!("{} vs {} entries", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// 1-based ranks; ties share the mean of their positions.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Spearman rank correlation (Pearson on midranks); constant input gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("spearman", format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(pearson(&midranks(a), &midranks(b)))
}

/// Fraction of voxel pairs on which two labelings agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(
            "rand_index",
            format!("partitions cover {} and {} voxels", a.len(), b.len()),
        ));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut agree = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

/// Mean Rand index of `trials` random balanced partitions against `planted`.
pub fn random_partition_baseline(planted: &[usize], groups: usize, trials: usize, seed: u64) -> Result<f64> {
    if groups == 0 || !planted.len().is_multiple_of(groups) || trials == 0 {
        return Err(Error::invalid("random_partition_baseline", "need balanced groups and ≥ 1 trial"));
    }
    let size = planted.len() / groups;
    let mut rng = RngStream::new(seed, 0x5241_4E44);
    let mut total = 0.0;
    for _ in 0..trials {
        let perm = rng.permutation(planted.len());
        let mut labels = vec![0; planted.len()];
        for (k, &i) in perm.iter().enumerate() {
            labels[i] = k / size;
        }
        total += rand_index(&labels, planted)?;
    }
    Ok(total / trials as f64)
}

/// Closed-form ridge regression with an unpenalized intercept.
#[derive(Clone, Debug)]
pub struct Ridge {
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    x_mean: DVector<f64>,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

impl Ridge {
    pub fn fit(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() == 0 {
            return Err(Error::shape("ridge", "x and y row counts differ"));
        }
        let (xm, ym) = (to_dmatrix(x), to_dmatrix(y));
        let x_mean = xm.row_mean().transpose();
        let y_mean = ym.row_mean().transpose();
        let mut xc = xm;
        for mut r in xc.row_iter_mut() {
            r -= x_mean.transpose();
        }
        let mut gram = xc.transpose() * &xc;
        for i in 0..gram.nrows() {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("ridge", "gram matrix not positive definite"))?;
        let weights = chol.solve(&(xc.transpose() * ym));
        let intercept = y_mean - weights.transpose() * &x_mean;
        Ok(Self {
            weights,
            intercept,
            x_mean,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.x_mean.len() {
            return Err(Error::shape("ridge_predict", "voxel count differs from fit"));
        }
        let mut p = to_dmatrix(x) * &self.weights;
        for mut r in p.row_iter_mut() {
            r += self.intercept.transpose();
        }
        let data: Vec<f64> = p.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        Tensor::matrix(p.nrows(), p.ncols(), data)
    }
}

/// Named step series plus a final summary; serialized as CSV and JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub series: BTreeMap<String, Vec<(u64, f64)>>,
    pub summary: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn push(&mut self, name: &str, step: u64, value: f64) {
        self.series.entry(name.to_string()).or_default().push((step, value));
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.summary.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.summary.get(name).copied()
    }

    pub fn merge(&mut self, prefix: &str, other: &MetricsReport) {
        for (k, v) in &other.series {
            self.series.insert(format!("{prefix}{k}"), v.clone());
        }
        for (k, v) in &other.summary {
            self.summary.insert(format!("{prefix}{k}"), *v);
        }
    }

    /// Long format: `kind,name,step,value`; summary rows leave `step` empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,step,value\n");
        for (k, v) in &self.summary {
            s.push_str(&format!("summary,{k},,{v:?}\n"));
        }
        for (k, pts) in &self.series {
            for (step, v) in pts {
                s.push_str(&format!("series,{k},{step},{v:?}\n"));
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("metrics.json", e))
    }

    /// Write `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("metrics.csv"), &self.to_csv())?;
        write_text(&dir.join("metrics.json"), &self.to_json()?)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= w {
            acc -= v[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Plot-ready CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}
