//! Reverse-mode differentiation over a closed set of dense matrix kernels.
//!
//! A [`Tape`] records every operation in insertion order together with the
//! forward values it needs; [`Tape::backward`] walks the records in reverse
//! and accumulates vector-Jacobian products. The model graph is static, so
//! there is no general broadcasting: the only broadcasts are the explicit
//! [`Tape::broadcast_col`] and [`Tape::broadcast_row`] kernels.

mod check;
pub mod special;
mod tensor;

use thiserror::Error;

pub use check::{gradient_check, GradientCheck};
pub use tensor::Tensor;

use special::{digamma, ln_gamma, trigamma};
use tensor::gemm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: argument out of domain at index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix stored by column, used as the right operand of
/// [`Tape::sparse_matmul`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseColumns {
    pub rows: usize,
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl SparseColumns {
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols.len());
        for (j, col) in self.cols.iter().enumerate() {
            for &(r, v) in col {
                out.set(r, j, out.get(r, j) + v);
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul(Var, Box<SparseColumns>),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastCol(Var),
    BroadcastRow(Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Pow(Var, f64),
    Lgamma(Var),
    Digamma(Var),
    ClampMin(Var, f64),
    SoftmaxCols(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TapeError> {
    if a.shape() != b.shape() {
        return Err(TapeError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn check_positive(op: &'static str, t: &Tensor) -> Result<(), TapeError> {
    match t.data().iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        Some(index) => Err(TapeError::Domain {
            op,
            index,
            value: t.data()[index],
        }),
        None => Ok(()),
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_cols(x: &Tensor) -> Tensor {
    let (rows, cols) = x.shape();
    let mut out = Tensor::zeros(rows, cols);
    let mut max = vec![f64::NEG_INFINITY; cols];
    for r in 0..rows {
        for (c, m) in max.iter_mut().enumerate() {
            *m = m.max(x.get(r, c));
        }
    }
    let mut denom = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let e = (x.get(r, c) - max[c]).exp();
            out.set(r, c, e);
            denom[c] += e;
        }
    }
    for r in 0..rows {
        for (c, d) in denom.iter().enumerate() {
            out.set(r, c, out.get(r, c) / d);
        }
    }
    out
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `w * x` where `x` is a constant sparse matrix.
    pub fn sparse_matmul(&mut self, w: Var, x: SparseColumns) -> Result<Var, TapeError> {
        let wt = self.value(w);
        if wt.cols() != x.rows {
            return Err(TapeError::ShapeMismatch {
                op: "sparse_matmul",
                lhs: wt.shape(),
                rhs: (x.rows, x.cols.len()),
            });
        }
        let (m, n) = (wt.rows(), x.cols.len());
        let wt_t = wt.transpose();
        let mut out_t = Tensor::zeros(n, m);
        for (j, col) in x.cols.iter().enumerate() {
            let dst = &mut out_t.data_mut()[j * m..(j + 1) * m];
            for &(v, xv) in col {
                let src = &wt_t.data()[v * m..(v + 1) * m];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s * xv;
                }
            }
        }
        let out = out_t.transpose();
        let rg = self.rg(w);
        Ok(self.push(out, Op::SparseMatMul(w, Box::new(x)), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        check_same("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        check_same("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        check_same("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise quotient; the divisor must be nonzero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        check_same("div", self.value(a), self.value(b))?;
        if let Some(index) = self.value(b).data().iter().position(|&x| x == 0.0 || !x.is_finite()) {
            return Err(TapeError::Domain {
                op: "div",
                index,
                value: self.value(b).data()[index],
            });
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Repeats an `r x 1` column `n` times to an `r x n` matrix.
    pub fn broadcast_col(&mut self, v: Var, n: usize) -> Result<Var, TapeError> {
        let t = self.value(v);
        if t.cols() != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "broadcast_col",
                lhs: t.shape(),
                rhs: (t.rows(), 1),
            });
        }
        let value = Tensor::from_fn(t.rows(), n, |r, _| t.get(r, 0));
        let rg = self.rg(v);
        Ok(self.push(value, Op::BroadcastCol(v), rg))
    }

    /// Repeats a `1 x c` row `n` times to an `n x c` matrix.
    pub fn broadcast_row(&mut self, v: Var, n: usize) -> Result<Var, TapeError> {
        let t = self.value(v);
        if t.rows() != 1 {
            return Err(TapeError::ShapeMismatch {
                op: "broadcast_row",
                lhs: t.shape(),
                rhs: (1, t.cols()),
            });
        }
        let value = Tensor::from_fn(n, t.cols(), |_, c| t.get(0, c));
        let rg = self.rg(v);
        Ok(self.push(value, Op::BroadcastRow(v), rg))
    }

    /// Affine map `w * x + b` with `b` a column broadcast over `x`'s columns.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var, TapeError> {
        let wx = self.matmul(w, x)?;
        let n = self.value(x).cols();
        let bb = self.broadcast_col(b, n)?;
        self.add(wx, bb)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let value = self.value(a).concat_rows(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    /// Rows `[start, end)` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TapeError> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape(),
                rhs: (start, end),
            });
        }
        let value = t.slice_rows(start, end);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// `ln(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TapeError> {
        check_positive("log", self.value(a))?;
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// `x^c` for a constant exponent; the base must be positive.
    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var, TapeError> {
        check_positive("pow", self.value(a))?;
        let value = self.value(a).map(|x| x.powf(exponent));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Pow(a, exponent), rg))
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var, TapeError> {
        check_positive("lgamma", self.value(a))?;
        let value = self.value(a).map(ln_gamma);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Lgamma(a), rg))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var, TapeError> {
        check_positive("digamma", self.value(a))?;
        let value = self.value(a).map(digamma);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Digamma(a), rg))
    }

    /// `max(floor, x)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(value, Op::ClampMin(a, floor), rg)
    }

    /// Softmax over each column, with per-column max subtraction.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let value = softmax_cols(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxCols(a), rg)
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TapeError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, gemm(g, false, val(*b), true));
                }
                if self.rg(*b) {
                    acc(*b, gemm(val(*a), true, g, false));
                }
            }
            Op::SparseMatMul(w, x) => {
                let (m, v) = val(*w).shape();
                let g_t = g.transpose();
                let mut dw_t = Tensor::zeros(v, m);
                for (j, col) in x.cols.iter().enumerate() {
                    let src = &g_t.data()[j * m..(j + 1) * m];
                    for &(r, xv) in col {
                        let dst = &mut dw_t.data_mut()[r * m..(r + 1) * m];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += s * xv;
                        }
                    }
                }
                let dw = dw_t.transpose();
                acc(*w, dw);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(*b), |gi, bi| gi * bi));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(val(*a), |gi, ai| gi * ai));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(*b), |gi, bi| gi / bi));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = out.zip_map(val(*b), |o, bi| o / bi);
                    acc(*b, g.zip_map(&q, |gi, qi| -gi * qi));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::BroadcastCol(v) => {
                let sums: Vec<f64> = (0..g.rows())
                    .map(|r| (0..g.cols()).map(|c| g.get(r, c)).sum())
                    .collect();
                acc(*v, Tensor::column_vector(sums));
            }
            Op::BroadcastRow(v) => acc(*v, g.col_sums()),
            Op::ConcatRows(a, b) => {
                let (top, bottom) = g.split_rows(val(*a).rows());
                acc(*a, top);
                acc(*b, bottom);
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut full = Tensor::zeros(src.rows(), src.cols());
                let offset = start * src.cols();
                full.data_mut()[offset..offset + g.len()].copy_from_slice(g.data());
                acc(*a, full);
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi * sigmoid(x))),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi / x)),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gi, o| gi * o)),
            Op::Pow(a, c) => {
                let c = *c;
                acc(*a, g.zip_map(val(*a), |gi, x| gi * c * x.powf(c - 1.0)));
            }
            Op::Lgamma(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi * digamma(x))),
            Op::Digamma(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi * trigamma(x))),
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                acc(*a, g.zip_map(val(*a), |gi, x| if x > floor { gi } else { 0.0 }));
            }
            Op::SoftmaxCols(a) => {
                // dx = s * (g - sum_r(g * s)) per column
                let dots = g.zip_map(out, |gi, si| gi * si).col_sums();
                let dx = Tensor::from_fn(out.rows(), out.cols(), |r, c| {
                    out.get(r, c) * (g.get(r, c) - dots.get(0, c))
                });
                acc(*a, dx);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::full(r, c, g.item()));
            }
        }
    }
}
