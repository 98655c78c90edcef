//! Reverse-mode differentiation over a linear operation trace.
//!
//! A [`Tape`] records every operation applied during a forward pass. Node
//! indices are assigned in creation order, so the trace is topologically
//! sorted by construction and [`Tape::backward`] visits each node once in
//! reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::dense::{gemm, log_softmax_in_place};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: r×c → 1×c.
    Rows,
    /// Collapse columns: r×c → r×1.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { a: Var, b: Var, kind: Binary, bc: Broadcast },
    Affine { a: Var, scale: f64 },
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    SumAxis { a: Var, axis: Axis },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SegmentSum { a: Var, offsets: Vec<usize>, mean: bool },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every trainable parameter placed on a tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf with gradient tracking, not bound to a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Place a stored parameter on the tape. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.params.push((v, id));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, 0.0, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, ng))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, c) = (av.rows(), av.cols());
        let (br, bc) = (bv.rows(), bv.cols());
        Ok(if br == r && bc == c {
            Broadcast::Same
        } else if br == 1 && bc == 1 {
            Broadcast::Scalar
        } else if br == 1 && bc == c {
            Broadcast::Row
        } else if br == r && bc == 1 {
            Broadcast::Col
        } else {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
            ));
        })
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let bc = self.broadcast_kind(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bv.data()[i],
                    Broadcast::Row => bv.data()[i % c],
                    Broadcast::Col => bv.data()[i / c],
                    Broadcast::Scalar => bv.data()[0],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Binary { a, b, kind, bc }, ng))
    }

    /// Elementwise a + b; b may be same-shape, a 1×c row, an r×1 column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// scale·a + shift
    pub fn affine_scalar(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(&[a]);
        self.push(value, Op::Affine { a, scale }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine_scalar(a, s, 0.0)
    }

    /// x·W + b with b a 1×out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("log", "non-positive input"));
        }
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Log(a), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = crate::tensor::softmax_rows(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(Error::NonFinite {
                op: "log_softmax_rows",
            });
        }
        let c = av.cols();
        let mut out = av.data().to_vec();
        out.chunks_mut(c).for_each(log_softmax_in_place);
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::LogSoftmaxRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let value = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for row in av.data().chunks(c) {
                    out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                Tensor::matrix(1, c, out)
            }
            Axis::Cols => Tensor::matrix(r, 1, av.data().chunks(c).map(|row| row.iter().sum()).collect()),
        }
        .expect("sum_axis shape");
        let ng = self.ng(&[a]);
        self.push(value, Op::SumAxis { a, axis }, ng)
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Var {
        let av = self.value(a);
        let n = match axis {
            Axis::Rows => av.rows(),
            Axis::Cols => av.cols(),
        } as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in av.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::matrix(r, len, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let value = Tensor::matrix(r, total, out)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let value = Tensor::matrix(rows, c, out)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Sum (or mean) of consecutive row groups `[offsets[s], offsets[s+1])`.
    pub fn segment_sum(&mut self, a: Var, offsets: &[usize], mean: bool) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if offsets.len() < 2
            || offsets[0] != 0
            || *offsets.last().unwrap() != r
            || offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::invalid(
                "segment_sum",
                format!("offsets must increase strictly from 0 to {r}"),
            ));
        }
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * c];
        for s in 0..segs {
            let dst = &mut out[s * c..(s + 1) * c];
            for i in offsets[s]..offsets[s + 1] {
                dst.iter_mut()
                    .zip(&av.data()[i * c..(i + 1) * c])
                    .for_each(|(o, x)| *o += x);
            }
            if mean {
                let n = (offsets[s + 1] - offsets[s]) as f64;
                dst.iter_mut().for_each(|o| *o /= n);
            }
        }
        let value = Tensor::matrix(segs, c, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(
            value,
            Op::SegmentSum {
                a,
                offsets: offsets.to_vec(),
                mean,
            },
            ng,
        ))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.rows());
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::invalid("l2_normalize_rows", "zero-norm or non-finite row"));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::L2NormalizeRows { a, norms }, ng))
    }

    /// Reverse pass from a scalar output. Every trainable parameter placed on
    /// this tape receives a gradient (zero when it did not participate).
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let grads = self.backward_all(out)?;
        let mut result = Gradients::default();
        for &(v, id) in &self.params {
            let g = match &grads[v.0] {
                Some(g) => Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())?,
                None => Tensor::zeros_like(&self.nodes[v.0].value),
            };
            match result.map.get_mut(&id) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    result.map.insert(id, g);
                }
            }
        }
        Ok(result)
    }

    /// Gradient of a scalar output with respect to an arbitrary node.
    pub fn grad_of(&self, out: Var, wrt: Var) -> Result<Tensor> {
        let grads = self.backward_all(out)?;
        let shape = self.nodes[wrt.0].value.shape().to_vec();
        match &grads[wrt.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros_like(&self.nodes[wrt.0].value)),
        }
    }

    fn backward_all(&self, out: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let ov = &self.nodes[out.0].value;
        if ov.len() != 1 {
            return Err(Error::NotScalar(ov.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !trans_b, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, 1.0, gb);
                    } else {
                        gemm(k, m, n, av.data(), true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Binary { a, b, kind, bc } => {
                let c = node.value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bidx = |j: usize| match bc {
                    Broadcast::Same => j,
                    Broadcast::Row => j % c,
                    Broadcast::Col => j / c,
                    Broadcast::Scalar => 0,
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += match kind {
                            Binary::Add | Binary::Sub => *gj,
                            Binary::Mul => gj * bv[bidx(j)],
                        };
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (j, gj) in g.iter().enumerate() {
                        gb[bidx(j)] += match kind {
                            Binary::Add => *gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * av[j],
                        };
                    }
                }
            }
            Op::Affine { a, scale } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, gj)| *o += scale * gj);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * gelu_grad(x[j]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j];
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / x[j];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SumAxis { a, axis } => {
                let c = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += match axis {
                            Axis::Rows => g[j % c],
                            Axis::Cols => g[j / c],
                        };
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        ga[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let len = node.value.cols();
                let c = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        ga[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (r, gr) in g.chunks(total).enumerate() {
                            gp[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(&gr[off..off + pc])
                                .for_each(|(o, x)| *o += x);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(o, x)| *o += x);
                    }
                    off += n;
                }
            }
            Op::SegmentSum { a, offsets, mean } => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for s in 0..offsets.len() - 1 {
                        let w = if *mean {
                            1.0 / (offsets[s + 1] - offsets[s]) as f64
                        } else {
                            1.0
                        };
                        let gs = &g[s * c..(s + 1) * c];
                        for i in offsets[s]..offsets[s + 1] {
                            ga[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(gs)
                                .for_each(|(o, x)| *o += w * x);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
