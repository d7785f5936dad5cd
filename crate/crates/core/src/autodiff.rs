// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: the forward value is computed
//! when the node is pushed, and [`Graph::backward`] walks the tape in reverse
//! creation order (which is always a valid topological order). Leaves are
//! either trainable parameters, identified by a caller-chosen [`ParamId`],
//! or constants that never receive gradients.
//!
//! Shape errors inside graph construction are programmer errors and panic,
//! the same convention dense-array crates use. Numerical failures surface
//! from [`Graph::backward`] as [`Error`]s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Caller-assigned identity of a trainable leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

pub type Gradients = BTreeMap<ParamId, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    ClampMax(Var, f64),
    RmsNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    RankOne(Var, Vec<f64>, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    consumed: bool,
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

    /// Clears the tape so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable leaf. Registering the same id again returns the
    /// existing node.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("elementwise op: {e}"));
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a` (m×n) plus row vector `b` (n) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let n = va.cols();
        assert_eq!(vb.len(), n, "add_row: {:?} + {:?}", va.shape(), vb.shape());
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(value, Op::AddRow(a, b), ng)
    }

    /// `a` (m×n) times row vector `b` (n) broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let n = va.cols();
        assert_eq!(vb.len(), n, "mul_row: {:?} * {:?}", va.shape(), vb.shape());
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x *= y;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MulRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// `a · b` for a (m×k), b (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul: {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` for a (m×k), b (n×k); the linear-layer convention.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_t: {:?} x {:?}ᵀ", va.shape(), vb.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), true, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log σ(a)`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), |x| x.min(0.0) - (-x.abs()).exp().ln_1p())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `min(a, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ClampMax(a, c), |x| x.min(c))
    }

    /// Row-wise RMS normalisation without gain.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut inv = Vec::with_capacity(va.rows());
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for x in row.iter_mut() {
                *x *= r;
            }
            inv.push(r);
        }
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[a]);
        self.push(value, Op::RmsNorm(a, inv), ng)
    }

    fn rowwise(&mut self, a: Var, op: Op, f: impl Fn(&[f64], usize) -> Vec<f64>) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut data = Vec::with_capacity(va.len());
        for (i, row) in va.data().chunks(n).enumerate() {
            data.extend(f(row, i));
        }
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, Op::Softmax(a), |row, _| crate::tensor::softmax(row))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, Op::LogSoftmax(a), |row, _| crate::tensor::log_softmax(row))
    }

    /// Softmax of row `i` over columns `0..=i`; later columns are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, Op::CausalSoftmax(a), |row, i| {
            let keep = (i + 1).min(row.len());
            let mut out = crate::tensor::softmax(&row[..keep]);
            out.resize(row.len(), 0.0);
            out
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        assert!(start + len <= n, "slice_cols {start}+{len} > {n}");
        let mut data = Vec::with_capacity(m * len);
        for row in va.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data).unwrap();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.rows(), m, "concat_cols row mismatch");
                data.extend_from_slice(vp.row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data).unwrap();
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let n = va.cols();
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let data = va.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data).unwrap();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), n, "concat_rows col mismatch");
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let value = Tensor::new(vec![rows, n], data).unwrap();
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Embedding lookup: rows `idx` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let n = vt.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(vec![idx.len(), n], data).unwrap();
        let ng = self.ng(&[table]);
        self.push(value, Op::GatherRows(table, idx.to_vec()), ng)
    }

    /// Flat-index selection into a 1-D tensor.
    pub fn select(&mut self, a: Var, flat: &[usize]) -> Var {
        let va = self.value(a);
        let data = flat.iter().map(|&i| va.data()[i]).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::vector(data), Op::Select(a, flat.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum() / va.len().max(1) as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Row-wise rank-one update `h_t + c_t ⟨h_t, d⟩ d` with constant
    /// per-row coefficients `c_t` and constant direction `d`.
    pub fn rank_one(&mut self, a: Var, dir: &[f64], coef: &[f64]) -> Var {
        let va = self.value(a);
        let n = va.cols();
        assert_eq!(dir.len(), n, "rank_one direction length");
        assert_eq!(coef.len(), va.rows(), "rank_one coefficient count");
        let mut data = va.data().to_vec();
        for (row, &c) in data.chunks_mut(n).zip(coef) {
            if c == 0.0 {
                continue;
            }
            let p = crate::tensor::dot(row, dir);
            for (x, d) in row.iter_mut().zip(dir) {
                *x += c * p * d;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.ng(&[a]);
        self.push(value, Op::RankOne(a, dir.to_vec(), coef.to_vec()), ng)
    }

    /// Reverse pass from a scalar `loss`. Returns a gradient for every
    /// registered parameter (zeros where the loss does not depend on it).
    /// A graph can be differentiated once; call [`Graph::reset`] to reuse it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Autodiff("backward called twice without reset".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "node {} is detached from this graph ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].value.ensure_finite("loss")?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let mut out = Gradients::new();
        for (&id, &v) in &self.params {
            let shape = self.shape(v).to_vec();
            let data = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => vec![0.0; shape.iter().product()],
            };
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", id.0)));
            }
            out.insert(id, t);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
            }
            Op::AddRow(a, b) => {
                let n = self.nodes[b.0].value.len();
                acc(*a, g.to_vec());
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (s, x) in gb.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                acc(*b, gb);
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len();
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = vec![0.0; n];
                for (grow, arow) in g.chunks(n).zip(va.chunks(n)) {
                    for j in 0..n {
                        ga.push(grow[j] * vb[j]);
                        gb[j] += grow[j] * arow[j];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.nodes[a.0].needs_grad {
                    // dA = dC · B
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), false, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = dCᵀ · A
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g, true, ta.data(), false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Silu(a) => {
                let va = val(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => acc(*a, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::LogSigmoid(a) => {
                let va = val(*a);
                acc(*a, g.iter().zip(va).map(|(g, &x)| g * sigmoid(-x)).collect());
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, g.iter().zip(va).map(|(g, x)| g / x).collect());
            }
            Op::Exp(a) => acc(*a, g.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, g.iter().zip(va).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::ClampMax(a, c) => {
                let va = val(*a);
                acc(*a, g.iter().zip(va).map(|(&g, &x)| if x < *c { g } else { 0.0 }).collect());
            }
            Op::RmsNorm(a, inv) => {
                let n = self.nodes[a.0].value.cols();
                let mut ga = Vec::with_capacity(g.len());
                for ((grow, yrow), r) in g.chunks(n).zip(y.chunks(n)).zip(inv) {
                    let m = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    ga.extend(grow.iter().zip(yrow).map(|(g, y)| (g - y * m) * r));
                }
                acc(*a, ga);
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let n = node.value.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(y.chunks(n)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    ga.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - s)));
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(y.chunks(n)) {
                    let s: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(yrow).map(|(g, ly)| g - ly.exp() * s));
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let ta = &self.nodes[a.0].value;
                let (m, n) = (ta.rows(), ta.cols());
                let len = node.value.cols();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    acc(p, gp);
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = &self.nodes[a.0].value;
                let n = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                ga[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::GatherRows(table, idx) => {
                let tt = &self.nodes[table.0].value;
                let n = tt.cols();
                let mut gt = vec![0.0; tt.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gt[i * n + j] += g[r * n + j];
                    }
                }
                acc(*table, gt);
            }
            Op::Select(a, flat) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                for (k, &i) in flat.iter().enumerate() {
                    ga[i] += g[k];
                }
                acc(*a, ga);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[a.0].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                acc(*a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::RankOne(a, dir, coef) => {
                // Jacobian per row is I + c d dᵀ, which is symmetric.
                let n = dir.len();
                let mut ga = g.to_vec();
                for (row, &c) in ga.chunks_mut(n).zip(coef) {
                    if c == 0.0 {
                        continue;
                    }
                    let p = crate::tensor::dot(row, dir);
                    for (x, d) in row.iter_mut().zip(dir) {
                        *x += c * p * d;
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x` (fp64).
pub fn finite_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|b| b.abs()).fold(floor, f64::max);
    diff / scale
}
