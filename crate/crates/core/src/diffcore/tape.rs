//! Define-by-run computation tape.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! only ever appended, so inputs always precede the nodes that consume
//! them and a single reverse sweep visits each node once.

use std::rc::Rc;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use super::DiffError;

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Exp,
    Log,
    Softplus,
    ShiftedSoftplus,
    Square,
    Cos,
    SqrtEps(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinKind, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(UnaryKind, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    /// Sum over axis 0 (`keepdims`), giving `1 x n`.
    SumRows(usize),
    /// Sum over axis 1 (`keepdims`), giving `m x 1`.
    SumCols(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    Take(usize, Rc<[usize]>),
    L2Norm(usize),
    LayerNorm(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape over dense `f64` tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Broadcast geometry for a binary op between rank-2 operands.
#[derive(Clone, Copy)]
struct Bcast {
    rows: usize,
    cols: usize,
    a_rs: usize,
    a_cs: usize,
    b_rs: usize,
    b_cs: usize,
}

impl Bcast {
    /// Same-shape operands viewed as one long row.
    fn flat(n: usize) -> Self {
        Self {
            rows: 1,
            cols: n,
            a_rs: 0,
            a_cs: 1,
            b_rs: 0,
            b_cs: 1,
        }
    }

    fn resolve(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Option<Self>, DiffError> {
        if a.shape() == b.shape() {
            return Ok(None);
        }
        let (Some((ar, ac)), Some((br, bc))) = (a.dims2(), b.dims2()) else {
            return Err(shape_err(op, a, b));
        };
        let dim = |x: usize, y: usize| -> Option<usize> {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        let (Some(rows), Some(cols)) = (dim(ar, br), dim(ac, bc)) else {
            return Err(shape_err(op, a, b));
        };
        Ok(Some(Self {
            rows,
            cols,
            a_rs: if ar == 1 { 0 } else { ac },
            a_cs: if ac == 1 { 0 } else { 1 },
            b_rs: if br == 1 { 0 } else { bc },
            b_cs: if bc == 1 { 0 } else { 1 },
        }))
    }
}

fn apply_bin(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

impl Tape {
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
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, op: &'static str, kind: BinKind, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match Bcast::resolve(op, ta, tb)? {
            None => {
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| apply_bin(kind, *x, *y))
                    .collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Some(bc) => {
                let mut data = Vec::with_capacity(bc.rows * bc.cols);
                let (da, db) = (ta.data(), tb.data());
                for i in 0..bc.rows {
                    for j in 0..bc.cols {
                        let x = da[i * bc.a_rs + j * bc.a_cs];
                        let y = db[i * bc.b_rs + j * bc.b_cs];
                        data.push(apply_bin(kind, x, y));
                    }
                }
                Tensor::matrix(bc.rows, bc.cols, data)?
            }
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Binary(kind, a.0, b.0), rg))
    }

    /// Elementwise sum; rank-2 operands broadcast along unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, factor), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())
            .expect("same shape");
        let rg = self.rg(a.0);
        self.push(value, Op::AddScalar(a.0), rg)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let f = |x: f64| -> f64 {
            match kind {
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Softplus => softplus(x),
                UnaryKind::ShiftedSoftplus => softplus(x) - std::f64::consts::LN_2,
                UnaryKind::Square => x * x,
                UnaryKind::Cos => x.cos(),
                UnaryKind::SqrtEps(eps) => (x + eps).sqrt(),
                UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
            }
        };
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("same shape");
        let rg = self.rg(a.0);
        self.push(value, Op::Unary(kind, a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    /// `softplus(a) - ln 2`, which vanishes at zero.
    pub fn ssp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::ShiftedSoftplus, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Cos, a)
    }

    /// Elementwise `sqrt(a + eps)`.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        self.unary(UnaryKind::SqrtEps(eps), a)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (Some((m, k)), Some((k2, n))) = (ta.dims2(), tb.dims2()) else {
            return Err(shape_err("matmul", ta, tb));
        };
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let value = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = &self.nodes[a.0].value;
        if t.dims2().is_none() {
            return Err(DiffError::Rank {
                op: "transpose",
                shape: t.shape().to_vec(),
            });
        }
        let value = t.transpose();
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    /// Sum of all elements as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let m = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(m), Op::Mean(a.0), rg)
    }

    fn require2(&self, op: &'static str, a: Var) -> Result<(usize, usize), DiffError> {
        let t = &self.nodes[a.0].value;
        t.dims2().ok_or_else(|| DiffError::Rank {
            op,
            shape: t.shape().to_vec(),
        })
    }

    /// Sum over rows (axis 0), giving `1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let (m, n) = self.require2("sum_rows", a)?;
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::row(out), Op::SumRows(a.0), rg))
    }

    /// Mean over rows (axis 0), giving `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let m = self.require2("mean_rows", a)?.0;
        let s = self.sum_rows(a)?;
        Ok(self.scale(s, 1.0 / m.max(1) as f64))
    }

    /// Sum over columns (axis 1), giving `m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, DiffError> {
        let (m, n) = self.require2("sum_cols", a)?;
        let d = self.nodes[a.0].value.data();
        let out = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::col(out), Op::SumCols(a.0), rg))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        if parts.is_empty() || axis > 1 {
            return Err(DiffError::Empty("concat"));
        }
        let first = &self.nodes[parts[0].0].value;
        let (r0, c0) = self.require2("concat", parts[0])?;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.require2("concat", *p)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(shape_err("concat", first, &self.nodes[p.0].value));
            }
            dims.push((r, c));
        }
        let value = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (p, (_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.nodes[p.0].value.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        let rg = parts.iter().any(|p| self.rg(p.0));
        let inputs = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat { inputs, axis }, rg))
    }

    /// Rows or columns `start..end` of a rank-2 tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let (m, n) = self.require2("slice", a)?;
        let limit = if axis == 0 { m } else { n };
        if axis > 1 || start > end || end > limit {
            return Err(DiffError::Index {
                op: "slice",
                index: end,
                len: limit,
            });
        }
        let d = self.nodes[a.0].value.data();
        let value = if axis == 0 {
            Tensor::matrix(end - start, n, d[start * n..end * n].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for i in 0..m {
                data.extend_from_slice(&d[i * n + start..i * n + end]);
            }
            Tensor::matrix(m, w, data)?
        };
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Slice { a: a.0, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Row `k` of the output is row `idx[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &Rc<[usize]>) -> Result<Var, DiffError> {
        let (m, n) = self.require2("gather_rows", a)?;
        let d = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx.iter() {
            if r >= m {
                return Err(DiffError::Index {
                    op: "gather_rows",
                    index: r,
                    len: m,
                });
            }
            data.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        let value = Tensor::matrix(idx.len(), n, data)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::GatherRows(a.0, idx.clone()), rg))
    }

    /// Output row `idx[k]` accumulates row `k` of `a`; `out_rows` rows total.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        idx: &Rc<[usize]>,
        out_rows: usize,
    ) -> Result<Var, DiffError> {
        let (m, n) = self.require2("scatter_add_rows", a)?;
        if m != idx.len() {
            return Err(DiffError::Index {
                op: "scatter_add_rows",
                index: idx.len(),
                len: m,
            });
        }
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; out_rows * n];
        for (k, &r) in idx.iter().enumerate() {
            if r >= out_rows {
                return Err(DiffError::Index {
                    op: "scatter_add_rows",
                    index: r,
                    len: out_rows,
                });
            }
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(&d[k * n..(k + 1) * n]) {
                *o += x;
            }
        }
        let value = Tensor::matrix(out_rows, n, out)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::ScatterAddRows(a.0, idx.clone()), rg))
    }

    /// Flat element gather: `out.flat[k] = a.flat[idx[k]]`, reshaped to `shape`.
    pub fn take(&mut self, a: Var, idx: &Rc<[usize]>, shape: Vec<usize>) -> Result<Var, DiffError> {
        let d = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i >= d.len() {
                return Err(DiffError::Index {
                    op: "take",
                    index: i,
                    len: d.len(),
                });
            }
            data.push(d[i]);
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Take(a.0, idx.clone()), rg))
    }

    /// Euclidean norm of all entries as a `1 x 1` tensor. The gradient at the
    /// origin is taken to be zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let ss: f64 = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(ss.sqrt()), Op::L2Norm(a.0), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let (m, n) = self.require2("layer_norm", a)?;
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mu) * inv));
        }
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::LayerNorm(a.0), rg))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        if self.nodes.is_empty() {
            return Ok(Gradients { grads: Vec::new() });
        }
        let root_t = &self.nodes[root.0].value;
        if root_t.numel() != 1 {
            return Err(DiffError::NonScalarRoot(root_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |k: usize| -> &Tensor { &self.nodes[k].value };
        let mut acc = |k: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[k].requires_grad {
                return;
            }
            let slot = grads[k].get_or_insert_with(|| vec![0.0; self.nodes[k].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bc = Bcast::resolve("backward", ta, tb)
                    .expect("checked in forward")
                    .unwrap_or(Bcast::flat(g.len()));
                let (da, db) = (ta.data(), tb.data());
                acc(*a, &mut |ga| {
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            let gij = g[i * bc.cols + j];
                            let ka = i * bc.a_rs + j * bc.a_cs;
                            ga[ka] += match kind {
                                BinKind::Add | BinKind::Sub => gij,
                                BinKind::Mul => gij * db[i * bc.b_rs + j * bc.b_cs],
                                BinKind::Div => gij / db[i * bc.b_rs + j * bc.b_cs],
                            };
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            let gij = g[i * bc.cols + j];
                            let kb = i * bc.b_rs + j * bc.b_cs;
                            gb[kb] += match kind {
                                BinKind::Add => gij,
                                BinKind::Sub => -gij,
                                BinKind::Mul => gij * da[i * bc.a_rs + j * bc.a_cs],
                                BinKind::Div => {
                                    -gij * da[i * bc.a_rs + j * bc.a_cs] / (db[kb] * db[kb])
                                }
                            };
                        }
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |ga| {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x += gv * f;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x += gv;
                }
            }),
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Exp => y[k],
                            UnaryKind::Log => 1.0 / x[k],
                            UnaryKind::Softplus | UnaryKind::ShiftedSoftplus => sigmoid(x[k]),
                            UnaryKind::Square => 2.0 * x[k],
                            UnaryKind::Cos => -x[k].sin(),
                            UnaryKind::SqrtEps(_) => 0.5 / y[k],
                            UnaryKind::Clamp(lo, hi) => {
                                if x[k] >= *lo && x[k] <= *hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                acc(*a, &mut |ga| {
                    let d = matmul_nt(g, tb.data(), m, n, k);
                    for (x, v) in ga.iter_mut().zip(d) {
                        *x += v;
                    }
                });
                acc(*b, &mut |gb| {
                    let d = matmul_tn(ta.data(), g, m, k, n);
                    for (x, v) in gb.iter_mut().zip(d) {
                        *x += v;
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let w = g[0] / ga.len().max(1) as f64;
                for x in ga.iter_mut() {
                    *x += w;
                }
            }),
            Op::SumRows(a) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k % n];
                    }
                });
            }
            Op::SumCols(a) => {
                let n = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k / n];
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in inputs {
                    let (r, c) = (val(p).rows(), val(p).cols());
                    acc(p, &mut |gp| {
                        if *axis == 0 {
                            for (x, v) in gp.iter_mut().zip(&g[offset * c..(offset + r) * c]) {
                                *x += v;
                            }
                        } else {
                            for i in 0..r {
                                let src = &g[i * total_cols + offset..i * total_cols + offset + c];
                                for (x, v) in gp[i * c..(i + 1) * c].iter_mut().zip(src) {
                                    *x += v;
                                }
                            }
                        }
                    });
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { a, axis, start } => {
                let n = val(*a).cols();
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            let k = if *axis == 0 {
                                (i + start) * n + j
                            } else {
                                i * n + j + start
                            };
                            ga[k] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[k * n + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[k * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Take(a, idx) => acc(*a, &mut |ga| {
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }),
            Op::L2Norm(a) => {
                let x = val(*a).data();
                let y = node.value.data()[0];
                if y > 0.0 {
                    acc(*a, &mut |ga| {
                        for (gx, xv) in ga.iter_mut().zip(x) {
                            *gx += g[0] * xv / y;
                        }
                    });
                }
            }
            Op::LayerNorm(a) => {
                let x = val(*a).data();
                let y = node.value.data();
                let (m, n) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let row = &x[i * n..(i + 1) * n];
                        let mu = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gr = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[i * n + j] += inv * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw gradient buffer for `v`, if the root depends on it.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.raw(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
