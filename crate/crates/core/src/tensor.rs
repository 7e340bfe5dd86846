//! Dense row-major `f64` tensors and a tape-based reverse-mode graph.
//!
//! Every tensor is at most two-dimensional. A rank-1 tensor of length `d`
//! behaves as a single `1 × d` row for row-wise operations, and a rank-0
//! tensor is a scalar. Reductions always accumulate left to right so that
//! forward passes are bit-reproducible.
//!
//! The [`Graph`] records each operation as it is evaluated. Nodes are
//! appended in evaluation order, so reverse index order is a reverse
//! topological order and [`Graph::backward`] is a single sweep.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Smallest norm accepted by [`Graph::l2_normalize_rows`].
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.len() > 2 || expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count when viewed as a matrix.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.len() > 2 {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        Tensor {
            shape: vec![n, m],
            data: transpose_raw(&self.data, m, n),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Tensor {
            shape: vec![m, n],
            data: matmul_raw(&self.data, &other.data, m, k, n),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k, 1), b, (n, 1), m, k, n)
}

/// `m×k` by `k×n` product of strided row-major views, `(row, col)` strides.
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the slices hold every element addressed by the given shapes
    // and strides, and `c` is a fresh contiguous m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    StandardizeCols {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    MeanRows(Var),
    Relu(Var),
    QuickGelu(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    NormalizeSum {
        x: Var,
        total: f64,
    },
    PairwiseDist(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations with per-node gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.value(a).shape.clone(),
                rhs: vec![],
            });
        }
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v + c).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn row_broadcast(&self, op: &'static str, x: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.len() != n || tb.shape.len() != 1 {
            return Err(shape_err(op, tx, tb));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            for (v, &bv) in row.iter_mut().zip(&tb.data) {
                *v = f(*v, bv);
            }
        }
        Ok(Tensor {
            shape: tx.shape.clone(),
            data,
        })
    }

    /// `x[i, :] + b` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, b, |v, bv| v + bv)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[i, :] ⊙ g` for every row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, g, |v, gv| v * gv)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().fold(0.0, |acc, v| acc + (v - max).exp()).ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Per-row standardization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().fold(0.0, |a, v| a + v) / d as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let out = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-column standardization over the rows (batch statistics, biased
    /// variance). The affine part of a batch norm is applied separately.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let (mean, var) = column_stats(t);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = (t.data[i * n + j] - mean[j]) * inv_std[j];
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(out, Op::StandardizeCols { x, inv_std }, rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = t.data.clone();
        for (r, row) in data.chunks_mut(n.max(1)).enumerate() {
            let norm = row.iter().fold(0.0, |a, v| a + v * v).sqrt();
            if !(norm > EPS_NORM) {
                return Err(Error::DegenerateNorm(format!("l2_normalize row {r} (norm {norm:e})")));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Row-wise maximum along the last axis; ties resolve to the lowest index.
    pub fn max_rows(&mut self, x: Var) -> (Var, Vec<usize>) {
        let t = self.value(x);
        let n = t.cols();
        let mut values = Vec::with_capacity(t.rows());
        let mut argmax = Vec::with_capacity(t.rows());
        for row in t.data.chunks(n.max(1)) {
            let (i, v) = argmax_first(row);
            values.push(v);
            argmax.push(i);
        }
        let out = Tensor::vector(values);
        let rg = self.rg(x);
        let idx = argmax.clone();
        (self.push(out, Op::MaxRows { x, argmax }, rg), idx)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the row axis: `m×n → n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let mut acc = vec![0.0; n];
        for row in t.data.chunks(n.max(1)) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= m as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::vector(acc), Op::MeanRows(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `x · σ(1.702 x)`.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v * sigmoid(1.702 * v)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::QuickGelu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Stacks row blocks; rank-1 inputs count as a single row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n || t.shape.is_empty() {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Joins column blocks with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let m = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 || start >= end || end > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let n = t.cols();
        let out = Tensor {
            shape: vec![end - start, n],
            data: t.data[start * n..end * n].to_vec(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 || start >= end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&t.data[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![m, w],
                data,
            },
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// `x / Σx` for a rank-1 tensor with positive sum.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let total = t.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateNorm(format!("normalize_sum (sum {total:e})")));
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v / total).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeSum { x, total }, rg))
    }

    /// Euclidean distances between all row pairs: `B×D → B×B`.
    pub fn pairwise_dist(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (b, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    let s = t.row(i).iter().zip(t.row(j)).fold(0.0, |a, (p, q)| a + (p - q) * (p - q));
                    out[i * b + j] = s.sqrt();
                }
            }
        }
        let _ = d;
        let rg = self.rg(x);
        self.push(
            Tensor {
                shape: vec![b, b],
                data: out,
            },
            Op::PairwiseDist(x),
            rg,
        )
    }

    /// Picks entries by flat index into a rank-1 result.
    pub fn gather(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = flat.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape.clone(),
                rhs: vec![bad],
            });
        }
        let out = Tensor::vector(flat.iter().map(|&i| t.data[i]).collect());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather(x, flat.to_vec()), rg))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.len() != 1 || lt.shape.len() > 1 {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        if !self.rg(loss) {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only trainable leaves keep a gradient; interior buffers are dropped.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.rg(*a) {
                    let da = gemm(&g.data, (n, 1), &tb.data, (1, n), m, n, k);
                    self.acc(grads, *a, |buf| add_into(buf, &da));
                }
                if self.rg(*b) {
                    let db = gemm(&ta.data, (1, k), &g.data, (n, 1), k, m, n);
                    self.acc(grads, *b, |buf| add_into(buf, &db));
                }
            }
            Op::Transpose(a) => {
                let gt = transpose_raw(&g.data, y.shape[0], y.shape[1]);
                self.acc(grads, *a, |buf| add_into(buf, &gt));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, &g.data));
                self.acc(grads, *b, |buf| add_into(buf, &g.data));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, &g.data));
                self.acc(grads, *b, |buf| {
                    for (o, v) in buf.iter_mut().zip(&g.data) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(&g.data).zip(&tb.data) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(&g.data).zip(&ta.data) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |buf| {
                    for (o, gv) in buf.iter_mut().zip(&g.data) {
                        *o += gv * c;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |buf| add_into(buf, &g.data));
            }
            Op::AddRow(x, b) => {
                let n = y.cols();
                self.acc(grads, *x, |buf| add_into(buf, &g.data));
                self.acc(grads, *b, |buf| {
                    for row in g.data.chunks(n.max(1)) {
                        add_into(buf, row);
                    }
                });
            }
            Op::MulRow(x, gm) => {
                let n = y.cols();
                let (tx, tg) = (self.value(*x), self.value(*gm));
                self.acc(grads, *x, |buf| {
                    for (r, row) in g.data.chunks(n.max(1)).enumerate() {
                        for j in 0..n {
                            buf[r * n + j] += row[j] * tg.data[j];
                        }
                    }
                });
                self.acc(grads, *gm, |buf| {
                    for (r, row) in g.data.chunks(n.max(1)).enumerate() {
                        for j in 0..n {
                            buf[j] += row[j] * tx.data[r * n + j];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = y.cols();
                self.acc(grads, *x, |buf| {
                    for (r, (yr, gr)) in y.data.chunks(n.max(1)).zip(g.data.chunks(n.max(1))).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            buf[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = y.cols();
                self.acc(grads, *x, |buf| {
                    for (r, (yr, gr)) in y.data.chunks(n.max(1)).zip(g.data.chunks(n.max(1))).enumerate() {
                        let s = gr.iter().fold(0.0, |a, v| a + v);
                        for j in 0..n {
                            buf[r * n + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let tg = self.value(*gamma);
                self.acc(grads, *x, |buf| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g.data[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * tg.data[j];
                        }
                        let s1 = dxhat.iter().fold(0.0, |a, v| a + v);
                        let s2 = dxhat.iter().zip(hr).fold(0.0, |a, (p, q)| a + p * q);
                        for j in 0..d {
                            buf[r * d + j] += is / d as f64 * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gamma, |buf| {
                    for (gr, hr) in g.data.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *beta, |buf| {
                    for gr in g.data.chunks(d) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::StandardizeCols { x, inv_std } => {
                let (m, n) = (y.rows(), y.cols());
                self.acc(grads, *x, |buf| {
                    for j in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..m {
                            s1 += g.data[i * n + j];
                            s2 += g.data[i * n + j] * y.data[i * n + j];
                        }
                        for i in 0..m {
                            let gi = g.data[i * n + j];
                            let hi = y.data[i * n + j];
                            buf[i * n + j] += inv_std[j] / m as f64 * (m as f64 * gi - s1 - hi * s2);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = y.cols();
                self.acc(grads, *x, |buf| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y.data[r * n..(r + 1) * n];
                        let gr = &g.data[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            buf[r * n + j] += (gr[j] - yr[j] * s) / norm;
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let n = self.value(*x).cols();
                self.acc(grads, *x, |buf| {
                    for (r, &j) in argmax.iter().enumerate() {
                        buf[r * n + j] += g.data[r];
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.data[0];
                self.acc(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                self.acc(grads, *x, |buf| {
                    for row in buf.chunks_mut(n.max(1)) {
                        for (o, gv) in row.iter_mut().zip(&g.data) {
                            *o += gv / m as f64;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |buf| {
                    for ((o, gv), xv) in buf.iter_mut().zip(&g.data).zip(&tx.data) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::QuickGelu(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |buf| {
                    for ((o, gv), &xv) in buf.iter_mut().zip(&g.data).zip(&tx.data) {
                        let s = sigmoid(1.702 * xv);
                        *o += gv * (s + 1.702 * xv * s * (1.0 - s));
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g.data[offset..offset + len];
                    self.acc(grads, p, |buf| add_into(buf, slice));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |buf| {
                        for (r, row) in buf.chunks_mut(w.max(1)).enumerate() {
                            add_into(row, &g.data[r * n + col..r * n + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                let n = y.cols();
                self.acc(grads, *x, |buf| add_into(&mut buf[start * n..start * n + g.len()], &g.data));
            }
            Op::SliceCols(x, start) => {
                let n = self.value(*x).cols();
                let w = y.cols();
                self.acc(grads, *x, |buf| {
                    for (r, gr) in g.data.chunks(w.max(1)).enumerate() {
                        add_into(&mut buf[r * n + start..r * n + start + w], gr);
                    }
                });
            }
            Op::NormalizeSum { x, total } => {
                let s = dot(&g.data, &y.data);
                self.acc(grads, *x, |buf| {
                    for (o, gv) in buf.iter_mut().zip(&g.data) {
                        *o += (gv - s) / total;
                    }
                });
            }
            Op::PairwiseDist(x) => {
                let tx = self.value(*x);
                let (b, d) = (tx.rows(), tx.cols());
                self.acc(grads, *x, |buf| {
                    for i in 0..b {
                        for j in 0..b {
                            let dist = y.data[i * b + j];
                            let gv = g.data[i * b + j];
                            if i == j || dist <= 0.0 || gv == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = (tx.data[i * d + k] - tx.data[j * d + k]) / dist * gv;
                                buf[i * d + k] += diff;
                                buf[j * d + k] -= diff;
                            }
                        }
                    }
                });
            }
            Op::Gather(x, flat) => {
                self.acc(grads, *x, |buf| {
                    for (&idx, gv) in flat.iter().zip(&g.data) {
                        buf[idx] += gv;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.nodes[v.0].value.shape));
        }
        if let Some(t) = slot.as_mut() {
            f(&mut t.data);
        }
    }
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    for (o, v) in buf.iter_mut().zip(src) {
        *o += v;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

pub(crate) fn argmax_first(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Per-column mean and biased variance over the rows.
pub(crate) fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (t.rows(), t.cols());
    let mut mean = vec![0.0; n];
    for row in t.data.chunks(n.max(1)) {
        add_into(&mut mean, row);
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut var = vec![0.0; n];
    for row in t.data.chunks(n.max(1)) {
        for j in 0..n {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= m as f64;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);

        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_gradcheck() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2], 1.0, &mut r);
        let report = check_gradients(&[a, b], 1e-5, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let wv = g.constant(w.clone());
            let p = g.mul(c, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_gradcheck() {
        let mut r = rng();
        let x = Tensor::randn(&[7], 1.0, &mut r);
        let w = Tensor::randn(&[7], 1.0, &mut r);
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let y = g.softmax_rows(v[0]);
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 5], 1.0, &mut r);
        let gamma = Tensor::randn(&[5], 1.0, &mut r);
        let beta = Tensor::randn(&[5], 1.0, &mut r);
        let w = Tensor::randn(&[2, 5], 1.0, &mut r);
        let report = check_gradients(&[x, gamma, beta], 1e-5, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
        let y2 = g.l2_normalize_rows(y).unwrap();
        assert_eq!(g.value(y2).data(), &[0.6, 0.8]);

        let z = g.constant(Tensor::vector(vec![1e-13, 0.0]));
        assert!(matches!(g.l2_normalize_rows(z), Err(Error::DegenerateNorm(_))));
    }

    #[test]
    fn l2_normalize_unit_norm_on_random_vectors() {
        let mut r = rng();
        let mut g = Graph::new();
        for _ in 0..100 {
            let x = g.constant(Tensor::randn(&[17], 3.0, &mut r));
            let y = g.l2_normalize_rows(x).unwrap();
            assert!((g.value(y).l2_norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_gradcheck() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 4], 1.0, &mut r);
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let y = g.l2_normalize_rows(v[0])?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn max_rows_ties_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.2, 0.8, 0.8]));
        let (m, idx) = g.max_rows(x);
        assert_eq!(g.value(m).data(), &[0.8]);
        assert_eq!(idx, vec![1]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![5.0]));
        let (m, idx) = g.max_rows(x);
        assert_eq!((g.value(m).item(), idx[0]), (5.0, 0));
    }

    #[test]
    fn backward_examples_and_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[2, 3], 1.0, &mut rng()));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(s).unwrap();

        let mut g = Graph::new();
        let xt = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let x = g.param(xt.clone());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        let expect: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), expect.as_slice());

        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::DetachedGraph)));
    }

    #[test]
    fn composite_ops_gradcheck() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 8], 1.0, &mut r);
        let report = check_gradients(&[x, b], 1e-5, |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.mul_row(y, v[1])?;
            let y = g.quick_gelu(y);
            let t = g.transpose(y)?;
            let y = g.concat_cols(&[t, t])?;
            let y = g.slice_cols(y, 1, 7)?;
            let y = g.slice_rows(y, 1, 3)?;
            let y = g.reshape(y, &[12])?;
            let y = g.reshape(y, &[3, 4])?;
            let top = g.slice_rows(y, 0, 1)?;
            let y = g.concat_rows(&[y, top])?;
            let y = g.transpose(y)?;
            let wv = g.constant(w.clone().reshaped(&[8, 3]).unwrap().transpose().reshaped(&[3, 8]).unwrap());
            let wv2 = g.reshape(wv, &[4, 6])?;
            let y = g.reshape(y, &[4, 4])?;
            let y = g.concat_cols(&[y, y])?;
            let y = g.slice_cols(y, 0, 6)?;
            let p = g.mul(y, wv2)?;
            let ls = g.log_softmax_rows(p);
            let m = g.mean_rows(ls);
            let s = g.sum(m);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn norm_ops_gradcheck() {
        let mut r = rng();
        let x = Tensor::randn(&[5, 3], 1.0, &mut r).reshaped(&[5, 3]).unwrap();
        let w = Tensor::randn(&[5, 3], 1.0, &mut r);
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let s = g.standardize_cols(v[0], 1e-5);
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv)?;
            let d = g.pairwise_dist(p);
            let e = g.gather(d, &[1, 7, 13, 22])?;
            let f = g.relu(e);
            let f = g.add_scalar(f, 0.1);
            let n = g.normalize_sum(f)?;
            let sq = g.mul(n, n)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut r = rng();
            let mut g = Graph::new();
            let a = g.constant(Tensor::randn(&[9, 13], 1.0, &mut r));
            let b = g.constant(Tensor::randn(&[13, 5], 1.0, &mut r));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(c);
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-1e4f64..1e4, 1..40)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(xs));
            let y = g.softmax_rows(x);
            let s = g.value(y).sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_constructor_rejects_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![1.0]).is_err());
        let _ = GradCheck::default();
    }
}
