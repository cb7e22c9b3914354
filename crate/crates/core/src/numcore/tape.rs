//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every recorded value is a node on the tape. A [`Var`] is a handle to one
//! node; the node keeps its value, the rule needed to push gradients back to
//! its parents, and whether it requires a gradient at all. Nodes are appended
//! in evaluation order, so walking the tape backwards is a reverse
//! topological traversal and cycles cannot be built.
//!
//! Parameters are borrowed from the model for the tape's lifetime and
//! deduplicated by address, which lets callers look their gradients up with
//! the same `&Mat` they bound.

use std::borrow::Cow;
use std::collections::HashMap;

use super::mat::{gemm, mean_var, softmax_in_place, Mat};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Mat> },
    Embed { table: Var, ids: Vec<usize> },
    AddConst(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Mat, count: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Mat>>,
    params: HashMap<usize, Var>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded for {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned leaf (inputs, constants, or a parameter copy).
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Borrowed parameter leaf; binding the same matrix twice returns the same node.
    pub fn param(&mut self, value: &'a Mat, requires_grad: bool) -> Var {
        let key = value as *const Mat as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Cow::Borrowed(value), Op::Leaf, requires_grad);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = gemm(self.value(a), ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`, the row-form linear map.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, row), rg))
    }

    /// Adds a constant (non-differentiable) matrix.
    pub fn add_const(&mut self, x: Var, c: &Mat) -> Result<Var> {
        let out = self.value(x).add(c)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::AddConst(x), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Scale(x, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::SoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = self.value(x).layer_norm(self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Multi-head scaled dot-product attention over `q: Tq×d`, `k, v: Tk×d`.
    ///
    /// Heads are contiguous column blocks of width `d / heads`. With `causal`,
    /// query `i` only sees keys `j ≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
        }
        if kv.cols() != d || vv.shape() != kv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (qv.rows(), kv.rows());
        let mut out = Mat::zeros(tq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = col_block(qv, h * dh, dh);
            let kh = col_block(kv, h * dh, dh);
            let vh = col_block(vv, h * dh, dh);
            let mut s = gemm(&qh, false, &kh, true)?;
            for i in 0..tq {
                let row = s.row_mut(i);
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if causal && j > i { f64::NEG_INFINITY } else { *x * scale };
                }
                softmax_in_place(row);
            }
            let oh = gemm(&s, false, &vh, false)?;
            put_col_block(&mut out, &oh, h * dh);
            probs.push(s);
        }
        let _ = tk;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Cow::Owned(out), Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols());
        for (t, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Index { index: id, size: tv.rows() });
            }
            out.row_mut(t).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(Cow::Owned(out), Op::Embed { table, ids: ids.to_vec() }, rg))
    }

    /// Mean negative log-softmax of `targets` over non-pad positions (`0` if all pad).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::shape("cross_entropy", lv.shape(), (targets.len(), 1)));
        }
        let probs = lv.softmax_rows();
        let mut total = 0.0;
        let mut count = 0;
        for (t, &y) in targets.iter().enumerate() {
            if y >= lv.cols() {
                return Err(Error::Index { index: y, size: lv.cols() });
            }
            if y == pad {
                continue;
            }
            count += 1;
            total -= log_softmax_at(lv.row(t), y);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), pad, probs, count };
        Ok(self.push(Cow::Owned(Mat::filled(1, 1, loss)), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(Mat::filled(1, 1, s)), Op::Sum(x), rg)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    /// Gradient of the last backprop target w.r.t. `v` (zero when none reached it).
    pub fn grad(&self, v: Var) -> Mat {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Mat::zeros(r, c)
            }
        }
    }

    /// Gradient of a bound parameter, looked up by the matrix that was bound.
    pub fn param_grad(&self, p: &Mat) -> Option<&Mat> {
        let v = self.params.get(&(p as *const Mat as usize))?;
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Populates gradients of every reachable node that requires them.
    pub fn backprop(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Domain(format!(
                "backprop target must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Internal("loss node not on this tape".into()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_back(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Frozen nodes never hold a gradient.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn push_back(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |v: Var, delta: Mat, grads: &mut [Option<Mat>]| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            if v.0 >= i {
                return Err(Error::Internal("cycle detected in autodiff graph".into()));
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled_in_place(&delta, 1.0),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(a) {
                    // C = op(A)·op(B): dop(A) = G·op(B)ᵀ
                    let da = match ta {
                        false => gemm(g, false, bv, !tb)?,
                        true => gemm(bv, tb, g, true)?,
                    };
                    acc(a, da, grads)?;
                }
                if self.rg(b) {
                    let db = match tb {
                        false => gemm(av, !ta, g, false)?,
                        true => gemm(g, true, av, ta)?,
                    };
                    acc(b, db, grads)?;
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone(), grads)?;
                acc(b, g.clone(), grads)?;
            }
            &Op::AddRow(x, row) => {
                acc(x, g.clone(), grads)?;
                if self.rg(row) {
                    let mut d = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    let (rr, rc) = self.value(row).shape();
                    acc(row, Mat::from_vec(rr, rc, d.into_vec())?, grads)?;
                }
            }
            &Op::AddConst(x) => acc(x, g.clone(), grads)?,
            &Op::Scale(x, s) => acc(x, g.scale(s), grads)?,
            &Op::Gelu(x) => {
                let d = self.value(x).map(gelu_grad).hadamard(g)?;
                acc(x, d, grads)?;
            }
            &Op::SoftmaxRows(x) => {
                let p = &node.value;
                let mut d = Mat::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    softmax_backward_row(p.row(r), g.row(r), d.row_mut(r));
                }
                acc(x, d, grads)?;
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(x);
                let gv = self.value(gain);
                let (rows, cols) = xv.shape();
                let mut dx = Mat::zeros(rows, cols);
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let n = cols as f64;
                for r in 0..rows {
                    let (mean, var) = mean_var(xv.row(r));
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xv.row(r).iter().map(|v| (v - mean) * inv).collect();
                    let gr = g.row(r);
                    let dy: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let mean_dy = dy.iter().sum::<f64>() / n;
                    let mean_dyx = dy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dy[j] - mean_dy - xhat[j] * mean_dyx);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                acc(x, dx, grads)?;
                let gs = gv.shape();
                acc(gain, Mat::from_vec(gs.0, gs.1, dgain)?, grads)?;
                let bs = self.value(bias).shape();
                acc(bias, Mat::from_vec(bs.0, bs.1, dbias)?, grads)?;
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(qv.rows(), d);
                let mut dk = Mat::zeros(kv.rows(), d);
                let mut dv = Mat::zeros(vv.rows(), d);
                for (h, p) in probs.iter().enumerate() {
                    let gh = col_block(g, h * dh, dh);
                    let vh = col_block(vv, h * dh, dh);
                    let dp = gemm(&gh, false, &vh, true)?;
                    let dvh = gemm(p, true, &gh, false)?;
                    let mut ds = Mat::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        softmax_backward_row(p.row(r), dp.row(r), ds.row_mut(r));
                    }
                    let qh = col_block(qv, h * dh, dh);
                    let kh = col_block(kv, h * dh, dh);
                    let dqh = gemm(&ds, false, &kh, false)?.scale(scale);
                    let dkh = gemm(&ds, true, &qh, false)?.scale(scale);
                    put_col_block(&mut dq, &dqh, h * dh);
                    put_col_block(&mut dk, &dkh, h * dh);
                    put_col_block(&mut dv, &dvh, h * dh);
                }
                acc(*q, dq, grads)?;
                acc(*k, dk, grads)?;
                acc(*v, dv, grads)?;
            }
            Op::Embed { table, ids } => {
                if self.rg(*table) {
                    let tv = self.value(*table);
                    let mut d = Mat::zeros(tv.rows(), tv.cols());
                    for (t, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id).iter_mut().zip(g.row(t)) {
                            *o += v;
                        }
                    }
                    acc(*table, d, grads)?;
                }
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                let mut d = Mat::zeros(probs.rows(), probs.cols());
                if *count > 0 {
                    let s = g.get(0, 0) / *count as f64;
                    for (t, &y) in targets.iter().enumerate() {
                        if y == *pad {
                            continue;
                        }
                        for (o, p) in d.row_mut(t).iter_mut().zip(probs.row(t)) {
                            *o = p * s;
                        }
                        let cur = d.get(t, y);
                        d.set(t, y, cur - s);
                    }
                }
                acc(*logits, d, grads)?;
            }
            &Op::Sum(x) => {
                let (r, c) = self.value(x).shape();
                acc(x, Mat::filled(r, c, g.get(0, 0)), grads)?;
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[y] - lse
}

fn softmax_backward_row(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - dot);
    }
}

fn col_block(m: &Mat, start: usize, width: usize) -> Mat {
    Mat::from_fn(m.rows(), width, |i, j| m.get(i, start + j))
}

fn put_col_block(dst: &mut Mat, src: &Mat, start: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + src.cols()].copy_from_slice(src.row(i));
    }
}
