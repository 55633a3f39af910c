//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough context to propagate adjoints back to its inputs. Node ids
//! increase monotonically, so reverse id order is a valid topological order.
//! A fresh graph is built for every forward pass; parameters enter it as
//! leaves bound to a [`ParamStore`] entry, and [`Graph::backward`] adds their
//! gradients into the store.

use std::collections::HashMap;

use crate::error::{Result, StamError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    MeanRows {
        x: Var,
        rows: usize,
    },
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    Row {
        x: Var,
        row: usize,
    },
    Concat(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: f64,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

/// Views a 1-D or 2-D shape as (rows, cols).
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [] => Some((1, 1)),
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Numerically stable softmax of a slice (max subtracted before `exp`).
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(StamError::domain("softmax", "empty input"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StamError::NonFinite { op: "softmax" });
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            param: None,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Inserts a leaf; it is differentiable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        let mut t = tensor;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf. Binding the same
    /// name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = store
            .get(name)
            .ok_or_else(|| StamError::UnknownParameter(name.to_string()))?;
        let mut value = Tensor::new(tensor.shape().to_vec(), tensor.values().to_vec())?;
        value.requires_grad = true;
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    // ---------------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------------

    /// Matrix product. 1-D operands act as a row vector on the left and a
    /// column vector on the right; the result drops those unit axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = as_matrix(&sa)
            .filter(|_| !sa.is_empty())
            .ok_or_else(|| StamError::shape("matmul", &[0, 0], &sa))?;
        let (k2, n) = match sb.as_slice() {
            [len] => (*len, 1),
            [r, c] => (*r, *c),
            _ => return Err(StamError::shape("matmul", &[k, 0], &sb)),
        };
        if k != k2 {
            return Err(StamError::Domain {
                op: "matmul",
                msg: format!("inner dimensions disagree: {sa:?} x {sb:?}"),
            });
        }
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![m, n],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(StamError::shape("transpose", &[0, 0], s)),
        };
        let src = self.values(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(cols, rows, out)?,
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(StamError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.values(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + shift)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.values(x).iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            s => Err(StamError::shape(op, &[0, 0], s)),
        }
    }

    /// Column-wise mean of a matrix: `[rows x cols] -> [cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("mean_rows", x)?;
        let mut out = vec![0.0; cols];
        for row in self.values(x).chunks(cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out)?, Op::MeanRows { x, rows }, rg))
    }

    /// Column-wise max of a matrix. The subgradient goes to the first row
    /// attaining the max.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("max_rows", x)?;
        let vals = self.values(x);
        let mut out = vals[..cols].to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = vals[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out)?, Op::MaxRows { x, argmax }, rg))
    }

    /// Softmax over the last axis (the whole vector for 1-D input).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) =
            as_matrix(&shape).ok_or_else(|| StamError::shape("softmax", &[0, 0], &shape))?;
        let mut out = Vec::with_capacity(self.values(x).len());
        for row in self.values(x).chunks(cols) {
            out.extend(softmax(row)?);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { x, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != src.numel() {
            return Err(StamError::shape("reshape", &shape, src.shape()));
        }
        let t = Tensor::new(shape, src.values().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row `row` of a matrix as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("row", x)?;
        if row >= rows {
            return Err(StamError::domain(
                "row",
                format!("row {row} out of range for {rows} rows"),
            ));
        }
        let out = self.values(x)[row * cols..(row + 1) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out)?, Op::Row { x, row }, rg))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(StamError::domain("concat", "no inputs"));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(StamError::shape("concat", &[0], self.shape(p)));
            }
            out.extend_from_slice(self.values(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Layer normalization of a vector with learnable affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(StamError::shape("layer_norm", &[0], &shape));
        }
        self.same_shape("layer_norm", x, gamma)?;
        self.same_shape("layer_norm", x, beta)?;
        let xs = self.values(x);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normalized: Vec<f64> = xs.iter().map(|v| (v - mean) * inv_std).collect();
        let out: Vec<f64> = normalized
            .iter()
            .zip(self.values(gamma))
            .zip(self.values(beta))
            .map(|((h, g), b)| h * g + b)
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        };
        Ok(self.push(Tensor::vector(out)?, op, rg))
    }

    /// `-log softmax(logits)[label]`, evaluated in log space.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.values(logits);
        if self.shape(logits).len() != 1 {
            return Err(StamError::shape("cross_entropy", &[0], self.shape(logits)));
        }
        if label >= z.len() {
            return Err(StamError::domain(
                "cross_entropy",
                format!("label {label} out of range for {} classes", z.len()),
            ));
        }
        let lse = log_sum_exp(z);
        let loss = lse - z[label];
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Propagates d`loss` to every differentiable leaf reachable from it.
    ///
    /// Leaf gradients accumulate across calls: into the leaf node itself, and
    /// for parameter leaves into the matching [`ParamStore`] entry.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(StamError::domain(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(up) = adj[id].take() else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                node.value.accumulate_grad(&up);
                if let Some(name) = &node.param {
                    params
                        .get_mut(name)
                        .ok_or_else(|| StamError::UnknownParameter(name.clone()))?
                        .accumulate_grad(&up);
                }
                continue;
            }
            for (input, delta) in self.local_grads(id, &up) {
                if !self.rg(input) {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` with upstream adjoint `up`.
    fn local_grads(&self, id: usize, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out = node.value.values();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut grads = Vec::with_capacity(2);
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let bv = self.values(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = urow.iter().zip(brow).map(|(u, w)| u * w).sum();
                        }
                    }
                    grads.push((*a, da));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let av = self.values(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            drow.iter_mut().zip(urow).for_each(|(d, u)| *d += aip * u);
                        }
                    }
                    grads.push((*b, db));
                }
                grads
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] = up[j * rows + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
            Op::Sub(a, b) => vec![(*a, up.to_vec()), (*b, up.iter().map(|u| -u).collect())],
            Op::Mul(a, b) => {
                let av = self.values(*a);
                let bv = self.values(*b);
                vec![
                    (*a, up.iter().zip(bv).map(|(u, y)| u * y).collect()),
                    (*b, up.iter().zip(av).map(|(u, x)| u * x).collect()),
                ]
            }
            Op::Scale(x, f) => vec![(*x, up.iter().map(|u| u * f).collect())],
            Op::AddScalar(x) => vec![(*x, up.to_vec())],
            Op::Sum(x) => vec![(*x, vec![up[0]; self.value(*x).numel()])],
            Op::MeanRows { x, rows } => {
                let inv = 1.0 / *rows as f64;
                let row: Vec<f64> = up.iter().map(|u| u * inv).collect();
                vec![(*x, row.repeat(*rows))]
            }
            Op::MaxRows { x, argmax } => {
                let cols = argmax.len();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (c, &r) in argmax.iter().enumerate() {
                    dx[r * cols + c] = up[c];
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxRows { x, cols } => {
                let mut dx = Vec::with_capacity(out.len());
                for (y, u) in out.chunks(*cols).zip(up.chunks(*cols)) {
                    let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(u).map(|(yi, ui)| yi * (ui - dot)));
                }
                vec![(*x, dx)]
            }
            Op::Tanh(x) => vec![(
                *x,
                up.iter().zip(out).map(|(u, y)| u * (1.0 - y * y)).collect(),
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                up.iter().zip(out).map(|(u, y)| u * y * (1.0 - y)).collect(),
            )],
            Op::Reshape(x) => vec![(*x, up.to_vec())],
            Op::Row { x, row } => {
                let cols = up.len();
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[row * cols..(row + 1) * cols].copy_from_slice(up);
                vec![(*x, dx)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).numel();
                        let slice = up[offset..offset + len].to_vec();
                        offset += len;
                        (p, slice)
                    })
                    .collect()
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gv = self.values(*gamma);
                let n = normalized.len() as f64;
                let dxhat: Vec<f64> = up.iter().zip(gv).map(|(u, g)| u * g).collect();
                let mean_d = dxhat.iter().sum::<f64>() / n;
                let mean_dh = dxhat
                    .iter()
                    .zip(normalized)
                    .map(|(d, h)| d * h)
                    .sum::<f64>()
                    / n;
                let dx = dxhat
                    .iter()
                    .zip(normalized)
                    .map(|(d, h)| inv_std * (d - mean_d - h * mean_dh))
                    .collect();
                let dgamma = up.iter().zip(normalized).map(|(u, h)| u * h).collect();
                vec![(*x, dx), (*gamma, dgamma), (*beta, up.to_vec())]
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * up[0]).collect();
                d[*label] -= up[0];
                vec![(*logits, d)]
            }
        }
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`, row-major.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
    c
}
