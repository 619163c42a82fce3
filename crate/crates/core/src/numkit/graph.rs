//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order. A graph built with [`Graph::inference`] keeps
//! values only: no parents, no gradients, and [`Graph::backward`] refuses
//! to run.

use crate::error::{Error, Result};

use super::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Cosine(Var, Var),
    LogSumExp(Var),
    Gather(Var, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph (train mode).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A value-only graph (inference mode).
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. In inference mode this is a plain constant.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.push_leaf(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, or zeros of the leaf's shape if nothing flowed in.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// `x[m, n] + b[1, n]`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        if bv.numel() != n {
            return Err(Error::dim(format!(
                "row broadcast of {:?} onto {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax where entry `(i, j)` with `j > i` gets probability 0.
    pub fn softmax_rows_causal(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let value = self.value(a).softmax_rows(causal)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Per-row layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim(format!(
                "layer norm gain/bias of {:?}/{:?} for width {}",
                self.value(gain).shape(),
                self.value(bias).shape(),
                n
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("log", value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, end)?;
        self.push("slice_rows", value, Op::SliceRows(a, start), &[a])
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, i + 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if start > end || end > n {
            return Err(Error::dim(format!(
                "column slice {}..{} of {:?}",
                start,
                end,
                av.shape()
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&av.row_slice(i)[start..end]);
        }
        let value = Tensor::matrix(m, w, out)?;
        self.push("slice_cols", value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat_rows(&refs)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != m {
                return Err(Error::dim(format!(
                    "concat cols of {} and {} rows",
                    m,
                    v.rows()
                )));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let value = Tensor::matrix(m, total, out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let value = Tensor::scalar(av.sum() / av.numel() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Column-wise mean over rows, giving a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_rows()?;
        self.push("mean_rows", value, Op::MeanRows(a), &[a])
    }

    /// Cosine similarity of two equally shaped tensors, as a scalar.
    /// A zero-norm operand yields similarity 0 with zero gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return Err(Error::dim(format!(
                "cosine of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let denom = av.norm() * bv.norm();
        let s = if denom == 0.0 { 0.0 } else { av.dot(bv) / denom };
        self.push("cosine", Tensor::scalar(s), Op::Cosine(a, b), &[a, b])
    }

    /// `log(sum(exp(a)))` over every element, as a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(Error::contract("log-sum-exp of an empty tensor"));
        }
        let max = av.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = av.data().iter().map(|v| (v - max).exp()).sum();
        let value = Tensor::scalar(max + s.ln());
        self.push("log_sum_exp", value, Op::LogSumExp(a), &[a])
    }

    /// Picks `a[r, c]` for each index pair into an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= av.rows() || c >= av.cols() {
                return Err(Error::dim(format!(
                    "gather index ({}, {}) out of {:?}",
                    r,
                    c,
                    av.shape()
                )));
            }
            out.push(av.get(r, c));
        }
        let value = Tensor::matrix(idx.len(), 1, out)?;
        self.push("gather", value, Op::Gather(a, idx.to_vec()), &[a])
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable
    /// from `loss`. Leaf gradients persist across calls until
    /// [`Graph::zero_grad`]; intermediate gradients are reset on each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::contract("backward on an inference-mode graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::filled(self.value(loss).shape(), 1.0);
        accumulate(&mut self.grads[loss.0], seed);

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &upstream)?;
            self.grads[idx] = Some(upstream);
            for (parent, g) in contributions {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut self.grads[parent.0], g);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    res.push((*a, reshape_like(dy.matmul(&bv.transpose())?, av)?));
                }
                if self.requires_grad(*b) {
                    res.push((*b, reshape_like(av.transpose().matmul(dy)?, bv)?));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, reshape_like(dy.transpose(), self.value(*a))?)],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.map(|v| -v))],
            Op::Mul(a, b) => {
                let da = dy.zip_map(self.value(*b), |g, bv| g * bv)?;
                let db = dy.zip_map(self.value(*a), |g, av| g * av)?;
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(x, b) => {
                let n = dy.cols();
                let mut db = vec![0.0; n];
                for (i, g) in dy.data().iter().enumerate() {
                    db[i % n] += g;
                }
                let bshape = self.value(*b).shape().to_vec();
                vec![(*x, dy.clone()), (*b, Tensor::new(bshape, db)?)]
            }
            Op::Scale(a, c) => vec![(*a, dy.map(|g| g * c))],
            Op::AddScalar(a) => vec![(*a, dy.clone())],
            Op::Softmax(a) => {
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row_slice(i);
                    let gr = dy.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (y.rows(), y.cols());
                let g = self.value(*gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let gr = dy.row_slice(i);
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * g[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let k = inv_std[i] / n as f64;
                    for j in 0..n {
                        let dh = gr[j] * g[j];
                        dx[i * n + j] = k * (n as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::new(y.shape().to_vec(), dx)?),
                    (*gain, Tensor::new(self.value(*gain).shape().to_vec(), dgain)?),
                    (*bias, Tensor::new(self.value(*bias).shape().to_vec(), dbias)?),
                ]
            }
            Op::Gelu(a) => {
                let d = self.value(*a).zip_map(dy, |x, g| {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                })?;
                vec![(*a, d)]
            }
            Op::Sigmoid(a) => vec![(*a, y.zip_map(dy, |s, g| g * s * (1.0 - s))?)],
            Op::Log(a) => vec![(*a, self.value(*a).zip_map(dy, |x, g| g / x)?)],
            Op::Exp(a) => vec![(*a, y.zip_map(dy, |e, g| g * e)?)],
            Op::Clamp(a, lo, hi) => {
                let d = self
                    .value(*a)
                    .zip_map(dy, |x, g| if x > *lo && x < *hi { g } else { 0.0 })?;
                vec![(*a, d)]
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut d = vec![0.0; av.numel()];
                d[start * n..start * n + dy.numel()].copy_from_slice(dy.data());
                vec![(*a, Tensor::new(av.shape().to_vec(), d)?)]
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (m, n) = (av.rows(), av.cols());
                let w = dy.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(dy.row_slice(i));
                }
                vec![(*a, Tensor::new(av.shape().to_vec(), d)?)]
            }
            Op::ConcatRows(parts) => {
                let n = dy.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = self.value(*p);
                    let rows = pv.rows();
                    let slice = dy.data()[offset * n..(offset + rows) * n].to_vec();
                    res.push((*p, Tensor::new(pv.shape().to_vec(), slice)?));
                    offset += rows;
                }
                res
            }
            Op::ConcatCols(parts) => {
                let m = dy.rows();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&dy.row_slice(i)[offset..offset + w]);
                    }
                    res.push((*p, Tensor::new(pv.shape().to_vec(), d)?));
                    offset += w;
                }
                res
            }
            Op::Sum(a) => {
                let g = dy.item();
                vec![(*a, Tensor::filled(self.value(*a).shape(), g))]
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let g = dy.item() / av.numel() as f64;
                vec![(*a, Tensor::filled(av.shape(), g))]
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (m, n) = (av.rows(), av.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = dy.data()[j] / m as f64;
                    }
                }
                vec![(*a, Tensor::new(av.shape().to_vec(), d)?)]
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (av.norm(), bv.norm());
                let g = dy.item();
                if na == 0.0 || nb == 0.0 {
                    vec![
                        (*a, Tensor::zeros(av.shape())),
                        (*b, Tensor::zeros(bv.shape())),
                    ]
                } else {
                    let s = y.item();
                    let da = bv.zip_map(av, |bj, aj| g * (bj / (na * nb) - s * aj / (na * na)))?;
                    let db = av.zip_map(bv, |aj, bj| g * (aj / (na * nb) - s * bj / (nb * nb)))?;
                    vec![(*a, da), (*b, db)]
                }
            }
            Op::LogSumExp(a) => {
                let lse = y.item();
                let g = dy.item();
                vec![(*a, self.value(*a).map(|v| g * (v - lse).exp()))]
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                let n = av.cols();
                for (k, &(r, c)) in idx.iter().enumerate() {
                    d.data_mut()[r * n + c] += dy.data()[k];
                }
                vec![(*a, d)]
            }
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn reshape_like(t: Tensor, like: &Tensor) -> Result<Tensor> {
    if t.shape() == like.shape() {
        Ok(t)
    } else {
        t.reshape(like.shape())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
