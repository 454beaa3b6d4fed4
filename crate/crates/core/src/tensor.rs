//! Dense 2-D arrays and a reverse-mode autodiff graph.
//!
//! Everything the models need is expressible over row-major `f64` matrices:
//! token sequences become `(len x width)` arrays, attention scores are
//! `(len x len)`, losses are `1x1`. A [`Graph`] records the forward ops and
//! [`Graph::backward`] accumulates gradients for every parameter leaf.
//! All arithmetic is sequential and order-stable, so identical inputs give
//! bit-identical results.

use crate::rng;
use rand::Rng;

/// Clamp floor applied before logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-9;

const LN_EPS: f64 = 1e-5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Array { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Array { rows: r, cols: c, data }
    }

    /// One-hot rows over `width` classes, one row per id.
    pub fn one_hot(ids: &[usize], width: usize) -> Self {
        let mut a = Array::zeros(ids.len(), width);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < width, "one_hot id out of range");
            a.data[i * width + id] = 1.0;
        }
        a
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(v: f64) -> Self {
        Array::from_vec(1, 1, vec![v])
    }

    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Xavier-uniform fill, deterministic under the given stream.
    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Array { rows, cols, data }
    }
}

fn matmul(a: &Array, b: &Array) -> Array {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Array::from_vec(m, n, out)
}

/// `a * b^T` where `a` is `m x k` and `b` is `n x k`.
fn matmul_bt(a: &Array, b: &Array) -> Array {
    assert_eq!(a.cols, b.cols, "matmul_bt shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Array::from_vec(m, n, out)
}

/// `a^T * b` where `a` is `m x k` and `b` is `m x n`.
fn matmul_at(a: &Array, b: &Array) -> Array {
    assert_eq!(a.rows, b.rows, "matmul_at shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Array::from_vec(k, n, out)
}

/// Named parameter arrays with stable ids and registration order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array>,
}

pub type ParamId = usize;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), arrays: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, array: Array) -> ParamId {
        self.names.push(name.into());
        self.arrays.push(array);
        self.arrays.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.arrays[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.arrays[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(|n| n.as_str()).zip(self.arrays.iter())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_values(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient per parameter id; `None` where the parameter was unused.
#[derive(Debug)]
pub struct Gradients {
    pub by_param: Vec<Option<Array>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Gradients { by_param: (0..n_params).map(|_| None).collect() }
    }

    /// Adds `other` into `self`, in parameter-id order.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(s) = src {
                match dst {
                    Some(d) => {
                        for (dv, sv) in d.data.iter_mut().zip(&s.data) {
                            *dv += sv;
                        }
                    }
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.iter_mut().flatten() {
            for v in &mut g.data {
                *v *= factor;
            }
        }
    }
}

/// Where a composed row comes from: an input row or a fixed constant row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSrc {
    From(usize),
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    SoftmaxRows(NodeId),
    LogClamped(NodeId, f64),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    Sigmoid(NodeId),
    L1ToConst(NodeId, Array),
    CrossEntropyRows(NodeId, Vec<usize>),
    ComposeRows { x: NodeId, plan: Vec<RowSrc> },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Array,
    op: Op,
}

/// A forward computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, a: Array) -> NodeId {
        self.push(a, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(params.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`; rows of `b` are the "keys".
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let v = Array::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.rows, 1, "bias must be a row vector");
        assert_eq!(x.cols, b.cols, "bias width mismatch");
        let mut v = x.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            for (j, bv) in b.data.iter().enumerate() {
                row[j] += bv;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let x = self.value(a);
        let v = Array::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * c).collect());
        self.push(v, Op::Scale(a, c))
    }

    /// Adds a constant array (no gradient flows into the constant).
    pub fn add_const(&mut self, a: NodeId, c: Array) -> NodeId {
        let x = self.value(a);
        assert_eq!((x.rows, x.cols), (c.rows, c.cols), "add_const shape mismatch");
        let data = x.data.iter().zip(&c.data).map(|(p, q)| p + q).collect();
        let v = Array::from_vec(x.rows, x.cols, data);
        self.push(v, Op::AddConst(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// `ln(max(x, eps))` elementwise.
    pub fn log_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let data = x.data.iter().map(|&p| p.max(eps).ln()).collect();
        let v = Array::from_vec(x.rows, x.cols, data);
        self.push(v, Op::LogClamped(a, eps))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x
            .data
            .iter()
            .map(|&p| 0.5 * p * (1.0 + libm::erf(p * std::f64::consts::FRAC_1_SQRT_2)))
            .collect();
        let v = Array::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Gelu(a))
    }

    /// Per-row layer normalization with learnable gain and bias (`1 x n`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (xa, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(g.rows, 1);
        assert_eq!(b.rows, 1);
        assert_eq!(g.cols, xa.cols);
        assert_eq!(b.cols, xa.cols);
        let mut v = xa.clone();
        let n = v.cols as f64;
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, p) in row.iter_mut().enumerate() {
                *p = (*p - mean) * inv * g.data[j] + b.data[j];
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias })
    }

    /// Gathers rows of `table` by id.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Array::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.rows, "embed id out of range");
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let a = self.value(x);
        assert!(start + len <= a.cols, "slice_cols out of range");
        let mut v = Array::zeros(a.rows, len);
        for r in 0..a.rows {
            v.row_mut(r).copy_from_slice(&a.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Array::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let a = self.value(p);
            assert_eq!(a.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + a.cols].copy_from_slice(a.row(r));
            }
            off += a.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean over rows, result `1 x n`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let a = self.value(x);
        assert!(a.rows > 0, "mean_rows on empty array");
        let mut v = Array::zeros(1, a.cols);
        for r in 0..a.rows {
            for (j, p) in a.row(r).iter().enumerate() {
                v.data[j] += p;
            }
        }
        let inv = 1.0 / a.rows as f64;
        for p in &mut v.data {
            *p *= inv;
        }
        self.push(v, Op::MeanRows(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let a = self.value(x);
        let data = a.data.iter().map(|&p| 1.0 / (1.0 + (-p).exp())).collect();
        let v = Array::from_vec(a.rows, a.cols, data);
        self.push(v, Op::Sigmoid(x))
    }

    /// Scalar `sum |x - target|`.
    pub fn l1_to_const(&mut self, x: NodeId, target: Array) -> NodeId {
        let a = self.value(x);
        assert_eq!((a.rows, a.cols), (target.rows, target.cols));
        let s: f64 = a.data.iter().zip(&target.data).map(|(p, t)| (p - t).abs()).sum();
        self.push(Array::scalar(s), Op::L1ToConst(x, target))
    }

    /// Scalar `-(1/rows) * sum_i ln(max(p[i, ids[i]], LOG_EPS))`.
    pub fn cross_entropy_rows(&mut self, probs: NodeId, ids: &[usize]) -> NodeId {
        let p = self.value(probs);
        assert_eq!(p.rows, ids.len(), "cross_entropy target length mismatch");
        let mut s = 0.0;
        for (i, &t) in ids.iter().enumerate() {
            assert!(t < p.cols, "cross_entropy target out of range");
            s -= p.at(i, t).max(LOG_EPS).ln();
        }
        let v = Array::scalar(s / ids.len() as f64);
        self.push(v, Op::CrossEntropyRows(probs, ids.to_vec()))
    }

    /// Rebuilds a sequence row-by-row from input rows and fixed rows.
    /// Gradient flows only through `RowSrc::From` entries.
    pub fn compose_rows(&mut self, x: NodeId, plan: &[RowSrc], fixed: Array) -> NodeId {
        let a = self.value(x);
        assert!(!plan.is_empty(), "compose_rows empty plan");
        let mut v = Array::zeros(plan.len(), a.cols);
        for (i, src) in plan.iter().enumerate() {
            match *src {
                RowSrc::From(r) => {
                    assert!(r < a.rows, "compose_rows source out of range");
                    v.row_mut(i).copy_from_slice(a.row(r));
                }
                RowSrc::Fixed(r) => {
                    assert!(r < fixed.rows, "compose_rows fixed row out of range");
                    assert_eq!(fixed.cols, a.cols, "compose_rows width mismatch");
                    v.row_mut(i).copy_from_slice(fixed.row(r));
                }
            }
        }
        self.push(v, Op::ComposeRows { x, plan: plan.to_vec() })
    }

    /// Scalar `sum_i w_i * x_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut s = 0.0;
        for &(id, w) in terms {
            s += w * self.value(id).item();
        }
        self.push(Array::scalar(s), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from a scalar `loss` node; returns per-parameter gradients.
    pub fn backward(&mut self, loss: NodeId, n_params: usize) -> Gradients {
        assert_eq!((self.value(loss).rows, self.value(loss).cols), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));
        let mut out = Gradients::zeros(n_params);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            // Split borrow: nodes before idx receive gradient, node idx is read.
            let (head, tail) = self.nodes.split_at(idx);
            let node = &tail[0];
            let add_grad = |grads: &mut Vec<Option<Array>>, id: NodeId, g: Array| {
                debug_assert!(id.0 < idx, "graph must be topologically ordered");
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => match &mut out.by_param[*pid] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&gy.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gy),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (&head[a.0].value, &head[b.0].value);
                    let ga = matmul_bt(&gy, bv);
                    let gb = matmul_at(av, &gy);
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (&head[a.0].value, &head[b.0].value);
                    let ga = matmul(&gy, bv);
                    let gb = matmul_at(&gy, av);
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, gy.clone());
                    add_grad(&mut grads, *b, gy);
                }
                Op::AddBias(a, bias) => {
                    let bcols = head[bias.0].value.cols;
                    let mut gb = Array::zeros(1, bcols);
                    for r in 0..gy.rows {
                        for (j, v) in gy.row(r).iter().enumerate() {
                            gb.data[j] += v;
                        }
                    }
                    add_grad(&mut grads, *a, gy);
                    add_grad(&mut grads, *bias, gb);
                }
                Op::Scale(a, c) => {
                    let g = Array::from_vec(gy.rows, gy.cols, gy.data.iter().map(|v| v * c).collect());
                    add_grad(&mut grads, *a, g);
                }
                Op::AddConst(a) => add_grad(&mut grads, *a, gy),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = Array::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let dyr = gy.row(r);
                        let dot: f64 = yr.iter().zip(dyr).map(|(p, q)| p * q).sum();
                        let gr = g.row_mut(r);
                        for j in 0..yr.len() {
                            gr[j] = yr[j] * (dyr[j] - dot);
                        }
                    }
                    add_grad(&mut grads, *a, g);
                }
                Op::LogClamped(a, eps) => {
                    let x = &head[a.0].value;
                    let data = x
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&p, &d)| if p > *eps { d / p } else { 0.0 })
                        .collect();
                    add_grad(&mut grads, *a, Array::from_vec(x.rows, x.cols, data));
                }
                Op::Gelu(a) => {
                    let x = &head[a.0].value;
                    let data = x
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&p, &d)| {
                            let cdf = 0.5 * (1.0 + libm::erf(p * std::f64::consts::FRAC_1_SQRT_2));
                            let pdf = FRAC_1_SQRT_2PI * (-0.5 * p * p).exp();
                            d * (cdf + p * pdf)
                        })
                        .collect();
                    add_grad(&mut grads, *a, Array::from_vec(x.rows, x.cols, data));
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &head[x.0].value;
                    let gv = &head[gain.0].value;
                    let n = xv.cols as f64;
                    let mut gx = Array::zeros(xv.rows, xv.cols);
                    let mut gg = Array::zeros(1, xv.cols);
                    let mut gb = Array::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let xr = xv.row(r);
                        let dyr = gy.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // dxhat, and the two row means needed for dx
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; xr.len()];
                        for j in 0..xr.len() {
                            let xhat = (xr[j] - mean) * inv;
                            dxhat[j] = dyr[j] * gv.data[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat;
                            gg.data[j] += dyr[j] * xhat;
                            gb.data[j] += dyr[j];
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        let gxr = gx.row_mut(r);
                        for j in 0..xr.len() {
                            let xhat = (xr[j] - mean) * inv;
                            gxr[j] = (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
                        }
                    }
                    add_grad(&mut grads, *x, gx);
                    add_grad(&mut grads, *gain, gg);
                    add_grad(&mut grads, *bias, gb);
                }
                Op::Embed { table, ids } => {
                    let t = &head[table.0].value;
                    let mut gt = Array::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = gy.row(i);
                        let dst = gt.row_mut(id);
                        for j in 0..src.len() {
                            dst[j] += src[j];
                        }
                    }
                    add_grad(&mut grads, *table, gt);
                }
                Op::SliceCols { x, start, len } => {
                    let a = &head[x.0].value;
                    let mut g = Array::zeros(a.rows, a.cols);
                    for r in 0..a.rows {
                        g.row_mut(r)[*start..start + len].copy_from_slice(gy.row(r));
                    }
                    add_grad(&mut grads, *x, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = head[p.0].value.cols;
                        let mut g = Array::zeros(gy.rows, cols);
                        for r in 0..gy.rows {
                            g.row_mut(r).copy_from_slice(&gy.row(r)[off..off + cols]);
                        }
                        off += cols;
                        add_grad(&mut grads, p, g);
                    }
                }
                Op::MeanRows(x) => {
                    let a = &head[x.0].value;
                    let inv = 1.0 / a.rows as f64;
                    let mut g = Array::zeros(a.rows, a.cols);
                    for r in 0..a.rows {
                        for (j, v) in gy.data.iter().enumerate() {
                            g.row_mut(r)[j] = v * inv;
                        }
                    }
                    add_grad(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let data = y
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(&s, &d)| d * s * (1.0 - s))
                        .collect();
                    add_grad(&mut grads, *x, Array::from_vec(y.rows, y.cols, data));
                }
                Op::L1ToConst(x, target) => {
                    let a = &head[x.0].value;
                    let d = gy.item();
                    let data = a
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(&p, &t)| {
                            let diff = p - t;
                            if diff > 0.0 {
                                d
                            } else if diff < 0.0 {
                                -d
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add_grad(&mut grads, *x, Array::from_vec(a.rows, a.cols, data));
                }
                Op::CrossEntropyRows(p, ids) => {
                    let a = &head[p.0].value;
                    let d = gy.item();
                    let mut g = Array::zeros(a.rows, a.cols);
                    let inv = 1.0 / ids.len() as f64;
                    for (i, &t) in ids.iter().enumerate() {
                        let pv = a.at(i, t);
                        if pv > LOG_EPS {
                            g.set(i, t, -d * inv / pv);
                        }
                    }
                    add_grad(&mut grads, *p, g);
                }
                Op::ComposeRows { x, plan } => {
                    let a = &head[x.0].value;
                    let mut g = Array::zeros(a.rows, a.cols);
                    for (i, src) in plan.iter().enumerate() {
                        if let RowSrc::From(r) = *src {
                            let gr = gy.row(i);
                            let dst = g.row_mut(r);
                            for j in 0..gr.len() {
                                dst[j] += gr[j];
                            }
                        }
                    }
                    add_grad(&mut grads, *x, g);
                }
                Op::WeightedSum(terms) => {
                    let d = gy.item();
                    for &(id, w) in terms {
                        add_grad(&mut grads, id, Array::scalar(d * w));
                    }
                }
            }
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Samples a `rows x cols` array of Gumbel(0,1) noise.
pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Array {
    let data = (0..rows * cols)
        .map(|_| {
            // u in (0,1); guard both log arguments away from 0
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).max(f64::MIN_POSITIVE).ln()
        })
        .collect();
    Array::from_vec(rows, cols, data)
}

/// Convenience: derive a stream for array initialization.
pub fn init_stream(seed: u64, tag: u64) -> rand_chacha::ChaCha12Rng {
    rng::stream(seed, &[0x7061_7261_6d73, tag])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Finite-difference check of d(scalar head)/d(input x) for a builder.
    fn check_grad<F>(x0: Array, build: F, tol: f64)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let n_params = 1;
        // analytic: route x through a param so backward() reports it
        let mut ps = ParamSet::new();
        let pid = ps.register("x", x0.clone());
        let mut g = Graph::new();
        let x = g.param(&ps, pid);
        let head = build(&mut g, x);
        let grads = g.backward(head, n_params);
        let ga = grads.by_param[0].as_ref().expect("gradient missing").clone();

        let f = |arr: &Array| -> f64 {
            let mut ps = ParamSet::new();
            let pid = ps.register("x", arr.clone());
            let mut g = Graph::new();
            let x = g.param(&ps, pid);
            let head = build(&mut g, x);
            g.value(head).item()
        };
        let h = 1e-6;
        for i in 0..x0.data.len() {
            let mut plus = x0.clone();
            plus.data[i] += h;
            let mut minus = x0.clone();
            minus.data[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = ga.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((a - fd) / denom).abs() < tol,
                "grad mismatch at {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn seeded_array(rows: usize, cols: usize, seed: u64) -> Array {
        let mut r = crate::rng::stream(seed, &[99]);
        let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
        Array::from_vec(rows, cols, data)
    }

    /// Reduce any array to a scalar with fixed pseudo-random weights so every
    /// output entry contributes to the head.
    fn reduce(g: &mut Graph, x: NodeId) -> NodeId {
        let v = g.value(x);
        let (rows, cols) = (v.rows, v.cols);
        let w = seeded_array(rows, cols, 1234);
        // x (rows x cols) * w_col (cols x 1) -> rows x 1, then row weights
        let wc = {
            let data = (0..cols).map(|j| w.data[j] * 0.7 + 0.3).collect();
            Array::from_vec(cols, 1, data)
        };
        let wcn = g.input(wc);
        let xr = g.matmul(x, wcn);
        let ones = Array::from_vec(1, rows, (0..rows).map(|i| 0.5 + (i as f64) * 0.25).collect());
        let on = g.input(ones);
        g.matmul(on, xr)
    }

    #[test]
    fn grad_matmul() {
        let x = seeded_array(3, 4, 1);
        let b = seeded_array(4, 2, 2);
        check_grad(x, move |g, xn| {
            let bn = g.input(b.clone());
            let y = g.matmul(xn, bn);
            reduce(g, y)
        }, 1e-5);
    }

    #[test]
    fn grad_matmul_bt() {
        let x = seeded_array(3, 4, 3);
        let b = seeded_array(5, 4, 4);
        check_grad(x, move |g, xn| {
            let bn = g.input(b.clone());
            let y = g.matmul_bt(xn, bn);
            reduce(g, y)
        }, 1e-5);
    }

    #[test]
    fn grad_softmax_log() {
        let x = seeded_array(2, 5, 5);
        check_grad(x, |g, xn| {
            let s = g.softmax_rows(xn);
            let l = g.log_clamped(s, 1e-12);
            reduce(g, l)
        }, 1e-5);
    }

    #[test]
    fn grad_layer_norm() {
        let x = seeded_array(3, 6, 6);
        let gain = seeded_array(1, 6, 7);
        let bias = seeded_array(1, 6, 8);
        check_grad(x, move |g, xn| {
            let gn = g.input(gain.clone());
            let bn = g.input(bias.clone());
            let y = g.layer_norm(xn, gn, bn);
            reduce(g, y)
        }, 1e-4);
    }

    #[test]
    fn grad_layer_norm_params() {
        // gradient w.r.t. gain/bias as the tracked input
        let gain = seeded_array(1, 6, 9);
        let x = seeded_array(3, 6, 10);
        let bias = seeded_array(1, 6, 11);
        check_grad(gain, move |g, gn| {
            let xn = g.input(x.clone());
            let bn = g.input(bias.clone());
            let y = g.layer_norm(xn, gn, bn);
            reduce(g, y)
        }, 1e-4);
    }

    #[test]
    fn grad_gelu_sigmoid_mean() {
        let x = seeded_array(4, 3, 12);
        check_grad(x, |g, xn| {
            let y = g.gelu(xn);
            let m = g.mean_rows(y);
            let s = g.sigmoid(m);
            reduce(g, s)
        }, 1e-5);
    }

    #[test]
    fn grad_attention_shape() {
        // q*k^T -> softmax -> *v, through slices and concat
        let x = seeded_array(4, 6, 13);
        let k = seeded_array(4, 3, 14);
        let v = seeded_array(4, 3, 15);
        check_grad(x, move |g, xn| {
            let q = g.slice_cols(xn, 0, 3);
            let kn = g.input(k.clone());
            let vn = g.input(v.clone());
            let scores = g.matmul_bt(q, kn);
            let scaled = g.scale(scores, 1.0 / 3.0_f64.sqrt());
            let probs = g.softmax_rows(scaled);
            let ctx = g.matmul(probs, vn);
            let rest = g.slice_cols(xn, 3, 3);
            let all = g.concat_cols(&[ctx, rest]);
            reduce(g, all)
        }, 1e-5);
    }

    #[test]
    fn grad_embed() {
        let table = seeded_array(7, 4, 16);
        check_grad(table, |g, tn| {
            let e = g.embed(tn, &[2, 5, 2, 0]);
            reduce(g, e)
        }, 1e-5);
    }

    #[test]
    fn grad_cross_entropy() {
        let x = seeded_array(3, 5, 17);
        check_grad(x, |g, xn| {
            let s = g.softmax_rows(xn);
            g.cross_entropy_rows(s, &[1, 4, 0])
        }, 1e-5);
    }

    #[test]
    fn grad_l1() {
        let x = seeded_array(1, 6, 18);
        let t = Array::from_vec(1, 6, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        check_grad(x, move |g, xn| {
            let s = g.sigmoid(xn);
            g.l1_to_const(s, t.clone())
        }, 1e-5);
    }

    #[test]
    fn grad_compose_rows() {
        let x = seeded_array(4, 3, 19);
        let fixed = seeded_array(2, 3, 20);
        let plan = vec![
            RowSrc::From(1),
            RowSrc::Fixed(0),
            RowSrc::From(3),
            RowSrc::From(1),
            RowSrc::Fixed(1),
        ];
        check_grad(x, move |g, xn| {
            let c = g.compose_rows(xn, &plan, fixed.clone());
            reduce(g, c)
        }, 1e-5);
    }

    #[test]
    fn grad_add_bias_and_weighted_sum() {
        let x = seeded_array(3, 4, 21);
        check_grad(x, |g, xn| {
            let bias = g.mean_rows(xn);
            let y = g.add_bias(xn, bias);
            let s1 = reduce(g, y);
            let sm = g.softmax_rows(xn);
            let s2 = g.cross_entropy_rows(sm, &[0, 2, 3]);
            g.weighted_sum(&[(s1, 0.4), (s2, 1.7)])
        }, 1e-5);
    }

    #[test]
    fn matmul_identity() {
        let a = seeded_array(3, 3, 22);
        let eye = {
            let mut e = Array::zeros(3, 3);
            for i in 0..3 {
                e.set(i, i, 1.0);
            }
            e
        };
        assert_eq!(matmul(&a, &eye).data, a.data);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut g = Graph::new();
        let x = g.input(seeded_array(5, 9, 23));
        let s = g.softmax_rows(x);
        for r in 0..5 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_noise_deterministic() {
        let mut r1 = crate::rng::stream(5, &[1]);
        let mut r2 = crate::rng::stream(5, &[1]);
        assert_eq!(gumbel_noise(3, 4, &mut r1).data, gumbel_noise(3, 4, &mut r2).data);
    }
}
