//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs all have smaller indices, so
//! node order is a topological order and the graph is acyclic by
//! construction. [`Graph::backward`] walks the nodes once in reverse and adds
//! the resulting gradients into the grad buffers of leaves created with
//! `requires_grad = true`. Calling it twice without [`Graph::zero_grad`]
//! accumulates.
//!
//! All matrices are row-major; a 1-D tensor of length `n` is treated as a
//! `1×n` row wherever a matrix is expected.

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    PairwiseDist(Var),
    Gather(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::L2NormRows { .. } => "l2_normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout(..) => "dropout",
            Op::PairwiseDist(..) => "pairwise_dist",
            Op::Gather(..) => "gather",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. With `requires_grad`, backward fills its grad buffer.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(row).numel() != n {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, row), &[x, row])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), &[x])
    }

    /// Concatenates along the feature (column) dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let m = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Concatenates along the row dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let n = self.dims(first).1;
        for &p in parts {
            if self.dims(p).1 != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
        }
        let m: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.shape(x).to_vec(),
                right: vec![start, len],
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows(x, start), &[x])
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                left: self.shape(x).to_vec(),
                right: vec![start, len],
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols(x, start), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / v.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column-wise mean over rows: `m×n -> 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / m.max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), &[x])
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (m, n) = src.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(src.row(i), &mut out[i * n..(i + 1) * n]);
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmaxRows(x), &[x])
    }

    /// Scales each row to unit Euclidean norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = src.dims2();
        let mut out = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = src.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::L2NormRows { x, norms },
            &[x],
        )
    }

    /// Per-row normalisation followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.dims(x);
        if self.value(gain).numel() != n {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).numel() != n {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = src.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
            inv_std.push(is);
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
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

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` while
    /// training; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push(t, Op::Dropout(x, mask), &[x])
    }

    /// Euclidean distances between all row pairs: `B×d -> B×B`.
    ///
    /// The gradient of a zero distance is taken to be zero.
    pub fn pairwise_dist(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (b, _) = src.dims2();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in i + 1..b {
                let d = src
                    .row(i)
                    .iter()
                    .zip(src.row(j))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                out[i * b + j] = d;
                out[j * b + i] = d;
            }
        }
        self.push(Tensor::new(vec![b, b], out)?, Op::PairwiseDist(x), &[x])
    }

    /// Picks elements by flat row-major index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape {
                op: "gather",
                left: self.shape(x).to_vec(),
                right: vec![bad],
            });
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        self.push(
            Tensor::new(vec![indices.len()], out)?,
            Op::Gather(x, indices.to_vec()),
            &[x],
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Backpropagates from a scalar loss into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::ones(self.shape(loss));
        self.backward_with(loss, &seed)
    }

    /// Backpropagates an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, upstream: &Tensor) -> Result<()> {
        if upstream.numel() != self.value(out).numel() {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(out).to_vec(),
                right: upstream.shape().to_vec(),
            });
        }
        let end = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        grads[out.0] = Some(upstream.data().to_vec());

        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                });
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) {
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = node.value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Adds into the gradient slot of `v`, allocating zeros on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.dims2().1;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(*a) {
                    acc(*a, &mut |s| gemm(m, n, k, g, false, bv, true, s, true));
                }
                if wants(*b) {
                    acc(*b, &mut |s| gemm(k, m, n, av, true, g, false, s, true));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)
            }),
            Op::AddRow(x, row) => {
                let (m, n) = node.value.dims2();
                acc(*x, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for i in 0..m {
                        add_into(s, &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2();
                acc(*x, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.dims2().1;
                    acc(*p, &mut |s| {
                        for i in 0..m {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let n = node.value.dims2().1;
                let len = g.len();
                acc(*x, &mut |s| add_into(&mut s[start * n..start * n + len], g));
            }
            Op::SliceCols(x, start) => {
                let (m, len) = node.value.dims2();
                let n = nodes[x.0].value.dims2().1;
                acc(*x, &mut |s| {
                    for i in 0..m {
                        add_into(&mut s[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((s, g), &x) in s.iter_mut().zip(g).zip(xv) {
                        *s += g * gelu_grad(x);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((s, g), &x) in s.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let k = g[0] / nodes[x.0].value.numel().max(1) as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += k));
            }
            Op::MeanRows(x) => {
                let (m, n) = nodes[x.0].value.dims2();
                let inv = 1.0 / m.max(1) as f64;
                acc(*x, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = node.value.dims2();
                acc(*x, &mut |s| {
                    for i in 0..m {
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = node.value.dims2();
                acc(*x, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            s[i * n + j] += gr[j] - out[i * n + j].exp() * total;
                        }
                    }
                });
            }
            Op::L2NormRows { x, norms } => {
                let (m, n) = node.value.dims2();
                acc(*x, &mut |s| {
                    for i in 0..m {
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[i * n + j] += (gr[j] - y[j] * dot) / norms[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = node.value.dims2();
                let gv = nodes[gain.0].value.data();
                acc(*gain, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for i in 0..m {
                        add_into(s, &g[i * n..(i + 1) * n]);
                    }
                });
                acc(*x, &mut |s| {
                    let nf = n as f64;
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            mean_d += d;
                            mean_dh += d * h[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            s[i * n + j] += inv_std[i] * (d - mean_d - h[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |s| {
                for ((s, g), k) in s.iter_mut().zip(g).zip(mask) {
                    *s += g * k;
                }
            }),
            Op::PairwiseDist(x) => {
                let xv = &nodes[x.0].value;
                let (b, d) = xv.dims2();
                acc(*x, &mut |s| {
                    for i in 0..b {
                        for j in 0..b {
                            let dist = out[i * b + j];
                            if i == j || dist == 0.0 {
                                continue;
                            }
                            let w = (g[i * b + j] + g[j * b + i]) / dist;
                            if w == 0.0 {
                                continue;
                            }
                            // Each unordered pair is visited twice; only the
                            // row-i side is accumulated here.
                            let (ri, rj) = (xv.row(i), xv.row(j));
                            for k in 0..d {
                                s[i * d + k] += w * (ri[k] - rj[k]);
                            }
                        }
                    }
                });
            }
            Op::Gather(x, idx) => acc(*x, &mut |s| {
                for (&k, g) in idx.iter().zip(g) {
                    s[k] += g;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let m = Tensor::from_rows(&[&[0.5, -2.0, 3.0], &[7.0, 1.5, -0.25]]);
        let mv = g.constant(m.clone()).unwrap();
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);
    }

    #[test]
    fn small_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[0.3, -1.2, 2.0, 0.0]])).unwrap();
        let xs = g.constant(Tensor::from_rows(&[&[100.3, 98.8, 102.0, 100.0]])).unwrap();
        let a = g.softmax_rows(x).unwrap();
        let b = g.softmax_rows(xs).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]])),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.5)).unwrap();
        let gain = g.constant(Tensor::ones(&[4])).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_already_normalised() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, -1.0]])).unwrap();
        let gain = g.constant(Tensor::ones(&[2])).unwrap();
        let bias = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2])).unwrap();
        let gain = g.constant(Tensor::ones(&[2])).unwrap();
        let bias = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.layer_norm(x, gain, bias, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[4, 4])).unwrap();
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[100_000])).unwrap();
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let zeros = v.iter().filter(|&&t| t == 0.0).count() as f64 / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zeros - 0.5).abs() < 0.01, "zero fraction {zeros}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 4.0]])).unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_half_squared_norm_is_identity() {
        let mut g = Graph::new();
        let data = Tensor::from_rows(&[&[1.0, -2.0, 3.0]]);
        let w = g.param(data.clone()).unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &data);
    }

    #[test]
    fn backward_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_rows(&[&[0.3, -0.7]])).unwrap();
        let y = g.gelu(w).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(w).unwrap().clone();
        g.backward(loss).unwrap();
        let twice = g.grad(w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::ones(&[2, 2])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2])).unwrap();
        let w = g.param(Tensor::ones(&[2])).unwrap();
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(w).is_some());
    }
}
