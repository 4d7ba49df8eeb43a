//! First-order reverse-mode differentiation over an append-only tape.
//!
//! Every op appends one node whose operands already live on the tape, so the
//! node order is a topological order and `backward` is a single reverse sweep.
//! Gradients accumulate by addition in tape order; there is no other source of
//! nondeterminism.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, sigmoid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    ReduceAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NarrowCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
}

/// Element-wise op selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
}

/// Reduction selector for [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// An append-only record of tensor operations.
///
/// Leaves may borrow their tensors (`leaf`, `constant_ref`), which lets a
/// parameter set be bound without copying.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of a backward sweep: one optional gradient per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Whether backward reached `var` at all.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf borrowing `t`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Cow::Borrowed(t),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf owning `t`.
    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Cow::Borrowed(t),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix("matmul")?;
        let (k2, n) = self.value(b).as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Sub, Some(b)) => self.sub(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid(a)),
            (kind, _) => Err(Error::config(format!("{kind:?}: wrong operand count"))),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), t, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), t, rg)
    }

    /// Adds the vector `b[n]` to every row of `a[..×n]` (bias add).
    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        if tb.numel() != n || tb.rank() != 1 {
            return Err(Error::shape("add_rows", ta.shape(), tb.shape()));
        }
        let bias = tb.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, &c) in row.iter_mut().zip(bias) {
                *x += c;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::AddRows(a, b), t, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), t, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(Op::Sigmoid(a), t, rg)
    }

    /// Row-wise softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.last_dim();
        if n == 0 {
            return Err(Error::shape("softmax_rows", ta.shape(), &[1]));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SoftmaxRows(a), t, rg))
    }

    /// Last-axis normalisation with biased variance, then `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.last_dim();
        for p in [gamma, beta] {
            let tp = self.value(p);
            if tp.rank() != 1 || tp.numel() != d {
                return Err(Error::shape("layer_norm", ta.shape(), tp.shape()));
            }
        }
        if d == 0 || eps <= 0.0 {
            return Err(Error::config("layer_norm needs d >= 1 and eps > 0"));
        }
        let rows = ta.rows();
        let mut xhat = vec![0.0; ta.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = ta.row(r);
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
            rg,
        ))
    }

    /// Full reduction (`axis = None`, scalar result) or reduction along one axis.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let ta = self.value(a);
        let rg = self.rg(&[a]);
        let Some(axis) = axis else {
            let total = ta.sum();
            return Ok(match kind {
                Reduce::Sum => self.push(Op::Sum(a), Tensor::scalar(total), rg),
                Reduce::Mean => {
                    let n = ta.numel().max(1) as f64;
                    self.push(Op::Mean(a), Tensor::scalar(total / n), rg)
                }
            });
        };
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = ta.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mean = kind == Reduce::Mean;
        if mean && len > 0 {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            Op::ReduceAxis {
                x: a,
                outer,
                len,
                inner,
                mean,
            },
            t,
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction cannot fail")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction cannot fail")
    }

    /// Rows of `a[n×d]` at `idx`, in order; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = ta.as_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), t, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).as_matrix("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (m, dp) = tp.as_matrix("concat_rows")?;
            if dp != d {
                return Err(Error::shape("concat_rows", &[rows, d], tp.shape()));
            }
            rows += m;
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).as_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let (mp, w) = tp.as_matrix("concat_cols")?;
            if mp != m {
                return Err(Error::shape("concat_cols", &[m], tp.shape()));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.as_matrix("narrow_cols")?;
        if start + len > n {
            return Err(Error::shape("narrow_cols", ta.shape(), &[start + len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::NarrowCols { x: a, start }, t, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.as_matrix("transpose")?;
        let src = ta.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), t, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, k) = match tl.shape() {
            &[k] => (1, k),
            &[b, k] => (b, k),
            other => return Err(Error::shape("cross_entropy", other, &[labels.len(), 0])),
        };
        if b != labels.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            t,
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`. The tape is left intact, so
    /// calling this twice gives identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut out: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g)
                        .expect("gradient shape mirrors value")
                })
            })
            .collect();
        out.resize(self.nodes.len(), None);
        Ok(Gradients { grads: out, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                self.acc(grads, *a, |ga| matmul_a_bt_acc(g, tb.data(), ga, m, k, n));
                self.acc(grads, *b, |gb| matmul_at_b_acc(ta.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, g));
                self.acc(grads, *b, |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, g));
                self.acc(grads, *b, |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(xb) {
                        *o += gi * bi;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(xa) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| axpy(ga, *s, g)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |ga| axpy(ga, 1.0, g)),
            Op::AddRows(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, 1.0, g));
                let n = self.value(*b).numel();
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(n.max(1)) {
                        axpy(gb, 1.0, row);
                    }
                });
            }
            Op::Relu(a) => self.acc(grads, *a, |ga| {
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *o += gi;
                    }
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            Op::SoftmaxRows(a) => {
                let n = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for ((go, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, gi), yi) in go.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        axpy(gb, 1.0, gr);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((gxr, gr), xr)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gxr[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ReduceAxis {
                x,
                outer,
                len,
                inner,
                mean,
            } => {
                let s = if *mean && *len > 0 { 1.0 / *len as f64 } else { 1.0 };
                self.acc(grads, *x, |gx| {
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for i in 0..*inner {
                                gx[base + i] += s * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let d = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut ga[src * d..(src + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |gp| axpy(gp, 1.0, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |gp| {
                        for (gr, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(gr, 1.0, &src[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::NarrowCols { x, start } => {
                let w = node.value.last_dim();
                let n = self.value(*x).last_dim();
                self.acc(grads, *x, |gx| {
                    for (gr, src) in gx.chunks_mut(n).zip(g.chunks(w)) {
                        axpy(&mut gr[*start..*start + w], 1.0, src);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let s = g[0] / b as f64;
                self.acc(grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
