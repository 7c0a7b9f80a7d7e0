//! Reverse-mode tape over a small set of rank-2 primitives.
//!
//! Ops are recorded eagerly: each call computes its value immediately and
//! appends a node. [`Tape::gradients`] walks the nodes backwards and returns
//! the gradient of a scalar with respect to every bound parameter whose
//! partition is trainable on this tape. Parameters of other partitions are
//! bound as constants and never receive a gradient.

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamStore, PartitionSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise function and its derivative, evaluated at the op input.
#[derive(Clone, Copy)]
pub struct UnaryFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl std::fmt::Debug for UnaryFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

pub const TANH: UnaryFn = UnaryFn {
    name: "tanh",
    f: f64::tanh,
    df: |x| {
        let t = x.tanh();
        1.0 - t * t
    },
};

pub const EXP: UnaryFn = UnaryFn {
    name: "exp",
    f: f64::exp,
    df: f64::exp,
};

pub const LOG: UnaryFn = UnaryFn {
    name: "log",
    f: f64::ln,
    df: |x| 1.0 / x,
};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU. Smooth everywhere, so finite differences apply.
pub const GELU: UnaryFn = UnaryFn {
    name: "gelu",
    f: |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
    df: |x| {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    },
};

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, UnaryFn),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    Sum(Var),
    MeanRows(Var),
    IndexSelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    Pick(Var, Vec<usize>),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Unary(_, u) => u.name,
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::LogSumExpRows(_) => "logsumexp",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::IndexSelectRows(..) => "index_select",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Pick(..) => "pick",
            Op::LayerNormRows { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if !acc.same_shape(g) {
                        return Err(Error::ShapeMismatch(format!("gradient {name}")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.grads.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    trainable: PartitionSet,
    bound: HashMap<String, Var>,
    error: Option<Error>,
}

impl Tape {
    pub fn new(trainable: PartitionSet) -> Self {
        Tape {
            nodes: Vec::new(),
            trainable,
            bound: HashMap::new(),
            error: None,
        }
    }

    /// A tape where nothing is trainable; used for plain forward passes.
    pub fn inference() -> Self {
        Self::new(PartitionSet::none())
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First non-finite intermediate recorded on this tape, if any.
    pub fn check(&self) -> Result<()> {
        match &self.error {
            Some(Error::NonFinite { op }) => Err(Error::NonFinite { op }),
            Some(e) => Err(Error::InvalidArgument(e.to_string())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.error.is_none() && !value.all_finite() {
            self.error = Some(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Binds a parameter from `store`. Binding the same name twice returns
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let trainable = self.trainable.contains(p.partition);
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Constant
        };
        let v = self.push(p.value.clone(), op, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_t inner dimensions");
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Transpose(a), rg)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        let (bm, bn) = self.dims(b);
        assert!(
            (bm == m || bm == 1) && (bn == n || bn == 1),
            "cannot broadcast {bm}x{bn} onto {m}x{n}"
        );
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let bi = if bm == 1 { 0 } else { i };
            for j in 0..n {
                let bj = if bn == 1 { 0 } else { j };
                out.push(f(av[i * n + j], bv[bi * bn + bj]));
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out).unwrap(), op, rg)
    }

    /// `a + b`, with `b` broadcast over rows and/or columns of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let (m, n) = (t.rows(), t.cols());
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::Scale(a, c), rg)
    }

    pub fn unary(&mut self, a: Var, u: UnaryFn) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&v| (u.f)(v)).collect();
        let (m, n) = (t.rows(), t.cols());
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::Unary(a, u), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, TANH)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, GELU)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, EXP)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, LOG)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = kernels::logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise log-sum-exp: `m x n -> m x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.value(a).data().chunks(n).map(kernels::logsumexp).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, 1, out).unwrap(), Op::LogSumExpRows(a), rg)
    }

    /// Sum of all entries, as a `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    /// Gathers rows of `table` (an embedding lookup).
    pub fn index_select_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (m, n) = self.dims(table);
        assert!(!ids.is_empty(), "index_select with no ids");
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            assert!(i < m, "index {i} out of range for {m} rows");
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::matrix(ids.len(), n, out).unwrap(),
            Op::IndexSelectRows(table, ids.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.dims(p);
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(len > 0 && start + len <= m, "slice_rows out of range");
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(len, n, out).unwrap(), Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(len > 0 && start + len <= n, "slice_cols out of range");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, len, out).unwrap(), Op::SliceCols(a, start, len), rg)
    }

    /// Picks one entry per row: `out[i] = a[i, idx[i]]`, as `m x 1`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(idx.len(), m, "pick needs one index per row");
        let src = self.value(a).data();
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "pick index {j} out of range for {n} columns");
                src[i * n + j]
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, 1, out).unwrap(), Op::Pick(a, idx.to_vec()), rg)
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(self.dims(gain), (1, n));
        assert_eq!(self.dims(bias), (1, n));
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::matrix(m, n, out).unwrap(),
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every bound
    /// trainable parameter (zero-filled if the loss does not depend on it).
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if let Op::Param(name) = &node.op {
                    out.insert(name.clone(), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        // Parameters bound after the loss node was recorded.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(name) = &node.op {
                out.insert(name.clone(), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let (m, n) = (node.value.rows(), node.value.cols());
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
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
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Constant => {}
            Op::Param(name) => {
                out.insert(
                    name.clone(),
                    Tensor::new(node.value.shape().to_vec(), g.to_vec()).unwrap(),
                );
            }
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    acc(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(self.value(*a).data(), g, m, k, n, &mut db);
                    acc(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ, a: m x k, b: n x k
                let (_, k) = self.dims(*a);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, self.value(*b).data(), m, n, k, &mut da);
                    acc(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn(g, self.value(*a).data(), m, n, k, &mut db);
                    acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                acc(grads, *a, kernels::transpose(g, m, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    let (bm, bn) = self.dims(*b);
                    let mut db = vec![0.0; bm * bn];
                    for r in 0..m {
                        let bi = if bm == 1 { 0 } else { r };
                        for c in 0..n {
                            let bj = if bn == 1 { 0 } else { c };
                            db[bi * bn + bj] += sign * g[r * n + c];
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (bm, bn) = self.dims(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if wants(*a) {
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let bi = if bm == 1 { 0 } else { r };
                        for c in 0..n {
                            let bj = if bn == 1 { 0 } else { c };
                            da[r * n + c] = g[r * n + c] * bv[bi * bn + bj];
                        }
                    }
                    acc(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; bm * bn];
                    for r in 0..m {
                        let bi = if bm == 1 { 0 } else { r };
                        for c in 0..n {
                            let bj = if bn == 1 { 0 } else { c };
                            db[bi * bn + bj] += g[r * n + c] * av[r * n + c];
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::Unary(a, u) => {
                let x = self.value(*a).data();
                acc(grads, *a, g.iter().zip(x).map(|(gv, &xv)| gv * (u.df)(xv)).collect());
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..n {
                        da[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..n {
                        da[r * n + c] = gr[c] - y[r * n + c].exp() * gsum;
                    }
                }
                acc(grads, *a, da);
            }
            Op::LogSumExpRows(a) => {
                let (am, an) = self.dims(*a);
                let x = self.value(*a).data();
                let y = node.value.data();
                let mut da = vec![0.0; am * an];
                for r in 0..am {
                    for c in 0..an {
                        da[r * an + c] = g[r] * (x[r * an + c] - y[r]).exp();
                    }
                }
                acc(grads, *a, da);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                acc(grads, *a, vec![g[0]; len]);
            }
            Op::MeanRows(a) => {
                let (am, an) = self.dims(*a);
                let inv = 1.0 / am as f64;
                let mut da = Vec::with_capacity(am * an);
                for _ in 0..am {
                    da.extend(g.iter().map(|v| v * inv));
                }
                acc(grads, *a, da);
            }
            Op::IndexSelectRows(table, ids) => {
                let (tm, tn) = self.dims(*table);
                let mut dt = vec![0.0; tm * tn];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..tn {
                        dt[id * tn + c] += g[r * tn + c];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if wants(p) {
                        acc(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * n + col..r * n + col + w]);
                        }
                        acc(grads, p, dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (am, an) = self.dims(*a);
                let mut da = vec![0.0; am * an];
                da[start * an..start * an + g.len()].copy_from_slice(g);
                acc(grads, *a, da);
            }
            Op::SliceCols(a, start, len) => {
                let (am, an) = self.dims(*a);
                let mut da = vec![0.0; am * an];
                for r in 0..am {
                    da[r * an + start..r * an + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(grads, *a, da);
            }
            Op::Pick(a, idx) => {
                let (am, an) = self.dims(*a);
                let mut da = vec![0.0; am * an];
                for (r, &j) in idx.iter().enumerate() {
                    da[r * an + j] = g[r];
                }
                acc(grads, *a, da);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                if wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let xh = &normalized[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] = inv_std[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    acc(grads, *x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * normalized[r * n + c];
                        }
                    }
                    acc(grads, *gain, dg);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    acc(grads, *bias, db);
                }
            }
        }
    }
}

pub(crate) mod kernels {
    /// `out += a · b` for row-major `a: m x k`, `b: k x n`. Each output row
    /// depends only on the matching row of `a`, accumulated in `k` order.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out += a · bᵀ` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    s += x * y;
                }
                out[i * n + j] += s;
            }
        }
    }

    /// `out += aᵀ · b` for `a: m x k`, `b: m x n`, giving `k x n`.
    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }

    pub fn logsumexp(xs: &[f64]) -> f64 {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
