//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] is an append-only arena. Every op pushes a node holding its
//! forward value and parent links, so parents always precede children and
//! reverse arena order is a valid topological order for [`Graph::backward`].
//! All values are rank-2 (`rows × cols`); vectors are `1 × n`.
//!
//! Leaves enter as `f32` [`Tensor`]s and results leave as `f32`, but node
//! values are held in `f64` so that finite-difference probes with an `f32`
//! step are not swamped by intermediate rounding. Any value that would not
//! be a finite `f32` is rejected at the op that produced it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A node's forward value.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Value {
    fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        };
        Self::new(rows, cols, t.data().iter().map(|&v| f64::from(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect())
            .expect("value shape is consistent")
    }

    /// The value of a `1 × 1` node.
    pub fn scalar(&self) -> f64 {
        self.data[0]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    MaskedLogSoftmaxRows { x: Var, mask: Vec<bool> },
    LogAddExp(Var, Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    RowDot { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Deliberate backward-pass corruption, used by the self-check to prove the
/// gradient checker catches a broken derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Scales the softmax input gradient by the given factor.
    SoftmaxGradScale(f64),
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Value> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient rounded to an `f32` tensor of the given shape.
    pub fn tensor(&self, v: Var, shape: &[usize]) -> Option<Tensor> {
        self.get(v).map(|g| {
            Tensor::new(shape.to_vec(), g.data.iter().map(|&x| x as f32).collect())
                .expect("gradient shape matches leaf")
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Rank-1 tensors become `1 × n`; higher ranks are
    /// flattened to `shape[0] × rest`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(&t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(&t, false)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        self.value(v).to_tensor()
    }

    fn push_leaf(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::from_tensor(t), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Value, op: Op, parents: &[Var], what: &'static str) -> Result<Var> {
        if value.data.iter().any(|v| !v.is_finite() || v.abs() > f64::from(f32::MAX)) {
            return Err(Error::NonFinite(what));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, what: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(a);
        let out = Value::new(src.rows, src.cols, src.data.iter().map(|&x| f(x)).collect());
        self.push(out, op, &[a], what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0f64; m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        self.push(Value::new(m, n, out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = &self.value(a).data;
        let mut out = vec![0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Value::new(n, m, out), Op::Transpose(a), &[a], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (m, n) = self.dims(a);
        let out = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        self.push(Value::new(m, n, out), Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(Error::Shape(format!("add_row: bias must be 1×{n}, got {:?}", self.dims(row))));
        }
        let r = &self.value(row).data;
        let mut out = self.value(a).data.clone();
        for chunk in out.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, b)| *o += b);
        }
        self.push(Value::new(m, n, out), Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (m, n) = self.dims(a);
        let out = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        self.push(Value::new(m, n, out), Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), "scale", |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), "gelu", gelu)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = softmax_rows(&self.value(a).data, m, n);
        self.push(Value::new(m, n, out), Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    /// Per-row normalisation to zero mean and unit variance (biased
    /// variance, `eps` inside the root), then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.dims(gain) != (1, d) || self.dims(bias) != (1, d) {
            return Err(Error::Shape(format!("layer_norm: gain/bias must be 1×{d}")));
        }
        let src = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0f64; m * d];
        let mut inv_std = vec![0f64; m];
        let mut out = vec![0f64; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let op = Op::LayerNorm { x, gain, bias, xhat, inv_std };
        self.push(Value::new(m, d, out), op, &[x, gain, bias], "layer_norm")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat_rows: no inputs".into()))?;
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::Shape(format!("concat_rows: width {c} vs {n}")));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(Value::new(rows, n, data), Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!("slice_rows {start}+{len} of {m}")));
        }
        let data = self.value(a).data[start * n..(start + len) * n].to_vec();
        self.push(Value::new(len, n, data), Op::SliceRows(a, start), &[a], "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::Shape(format!("concat_cols: height {r} vs {m}")));
            }
            total += c;
        }
        let mut data = vec![0f64; m * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.cols;
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&v.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Value::new(m, total, data), Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {n}")));
        }
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Value::new(m, len, data), Op::SliceCols(a, start), &[a], "slice_cols")
    }

    /// Column-wise mean over rows: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut acc = vec![0f64; n];
        for chunk in self.value(a).data.chunks_exact(n) {
            acc.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
        }
        acc.iter_mut().for_each(|s| *s /= m as f64);
        self.push(Value::new(1, n, acc), Op::MeanRows(a), &[a], "mean_rows")
    }

    /// Scales each row to unit Euclidean length. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = &self.value(x).data;
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0f64; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            norms.push(norm);
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let op = Op::L2NormalizeRows { x, norms };
        self.push(Value::new(m, n, out), op, &[x], "l2_normalize_rows")
    }

    /// Row-wise log-softmax restricted to the entries where `mask` is true.
    /// Excluded entries come out as `0` and receive no gradient.
    pub fn masked_log_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if mask.len() != m * n {
            return Err(Error::Shape("mask size differs from input".into()));
        }
        let src = &self.value(x).data;
        let mut out = vec![0f64; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let keep = &mask[i * n..(i + 1) * n];
            let kept = || row.iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v);
            let Some(max) = kept().reduce(f64::max) else { continue };
            let lse = max + kept().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                if keep[j] {
                    out[i * n + j] = row[j] - lse;
                }
            }
        }
        let op = Op::MaskedLogSoftmaxRows { x, mask };
        self.push(Value::new(m, n, out), op, &[x], "masked_log_softmax_rows")
    }

    /// Elementwise `log(exp(a) + exp(b))`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "log_add_exp")?;
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| {
                let hi = x.max(y);
                hi + ((x - hi).exp() + (y - hi).exp()).ln()
            })
            .collect();
        self.push(Value::new(m, n, out), Op::LogAddExp(a, b), &[a, b], "log_add_exp")
    }

    /// `Σ wᵢ xᵢ` as a `1 × 1` scalar, with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape("weighted_sum: weight count differs from input".into()));
        }
        let s = self.value(x).data.iter().zip(&weights).map(|(v, w)| v * w).sum();
        self.push(Value::new(1, 1, vec![s]), Op::WeightedSum { x, weights }, &[x], "weighted_sum")
    }

    /// Per-row `Σⱼ wᵢⱼ xᵢⱼ` with constant weights: `m × n → m × 1`.
    pub fn row_dot(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if weights.len() != m * n {
            return Err(Error::Shape("row_dot: weight count differs from input".into()));
        }
        let out = self
            .value(x)
            .data
            .chunks_exact(n)
            .zip(weights.chunks_exact(n))
            .map(|(r, w)| r.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Value::new(m, 1, out), Op::RowDot { x, weights }, &[x], "row_dot")
    }

    /// Gradients of a scalar `loss` with respect to every node that needs one.
    /// Only leaf gradients are retained in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let (r, c) = self.nodes[i].value.shape();
                g.map(|data| Value::new(r, c, data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.wants(*a) {
                    let mut da = vec![0f64; m * k];
                    gemm_nt(g, &self.value(*b).data, &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0f64; k * n];
                    gemm_tn(&self.value(*a).data, g, &mut db, m, k, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0f64; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                if self.wants(*row) {
                    let n = out.cols;
                    let mut dr = vec![0f64; n];
                    for chunk in g.chunks_exact(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *row, &dr);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f64> = g.iter().zip(&self.value(*b).data).map(|(g, b)| g * b).collect();
                    accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g.iter().zip(&self.value(*a).data).map(|(g, a)| g * a).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> =
                    g.iter().zip(&self.value(*a).data).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g.iter().zip(&self.value(*a).data).map(|(&g, &x)| g * gelu_grad(x)).collect();
                accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols;
                let mut da = vec![0f64; out.numel()];
                for ((dst, gr), yr) in da.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.data.chunks_exact(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                if let Some(Fault::SoftmaxGradScale(s)) = self.fault {
                    da.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, d) = out.shape();
                let gv = &self.value(*gain).data;
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0f64; d];
                    let mut db = vec![0f64; d];
                    for i in 0..m {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                            db[j] += g[i * d + j];
                        }
                    }
                    accumulate(grads, *gain, &dg);
                    accumulate(grads, *bias, &db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0f64; m * d];
                    for i in 0..m {
                        let r = i * d..(i + 1) * d;
                        let dh: Vec<f64> = g[r.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let h = &xhat[r];
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    accumulate(grads, *p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0f64; m * n];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(grads, *a, &da);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.shape();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    accumulate(grads, *p, &dp);
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let w = out.cols;
                let mut da = vec![0f64; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, &da);
            }
            Op::MeanRows(a) => {
                let m = self.dims(*a).0;
                let row: Vec<f64> = g.iter().map(|v| v / m as f64).collect();
                let da: Vec<f64> = std::iter::repeat_n(row.iter().copied(), m).flatten().collect();
                accumulate(grads, *a, &da);
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = out.cols;
                let mut dx = vec![0f64; out.numel()];
                for (i, ((dst, gr), yr)) in
                    dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.data.chunks_exact(n)).enumerate()
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        dst[j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::MaskedLogSoftmaxRows { x, mask } => {
                let n = out.cols;
                let mut dx = vec![0f64; out.numel()];
                for i in 0..out.rows {
                    let r = i * n..(i + 1) * n;
                    let gsum: f64 = r.clone().filter(|&j| mask[j]).map(|j| g[j]).sum();
                    for j in r {
                        if mask[j] {
                            dx[j] = g[j] - out.data[j].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::LogAddExp(a, b) => {
                let wa: Vec<f64> = self.value(*a).data.iter().zip(&out.data).map(|(x, o)| (x - o).exp()).collect();
                let da: Vec<f64> = g.iter().zip(&wa).map(|(g, w)| g * w).collect();
                let db: Vec<f64> = g.iter().zip(&wa).map(|(g, w)| g * (1.0 - w)).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::WeightedSum { x, weights } => {
                let dx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                accumulate(grads, *x, &dx);
            }
            Op::RowDot { x, weights } => {
                let n = self.dims(*x).1;
                let dx: Vec<f64> = weights.iter().enumerate().map(|(idx, w)| w * g[idx / n]).collect();
                accumulate(grads, *x, &dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn softmax_rows(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * n];
    for (dst, row) in out.chunks_exact_mut(n).zip(src.chunks_exact(n)).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
        }
        let total: f64 = dst.iter().sum();
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// `out = a · b` for `a: m×k`, `b: k×n`.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (d, &bj) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += aip * bj;
            }
        }
    }
}

/// `out = a · bᵀ` for `a: m×k`, `b: n×k`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out = aᵀ · b` for `a: m×k`, `b: m×n`, producing `k×n`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in a[p * k..(p + 1) * k].iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            for (d, &bj) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *d += api * bj;
            }
        }
    }
}
