//! Reverse-mode gradient tape for fixed MLP graphs.
//!
//! Operations append nodes in topological order during the forward pass;
//! `backward` walks the records once in reverse and accumulates vector-
//! Jacobian products. The tape is consumed by `backward`, which keeps the
//! one-tape-per-training-step discipline honest.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Matmul(usize, usize),
    /// matrix [n, d] + row vector [d], broadcast over rows
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    Sum(usize),
    /// Huber penalty, elementwise, summed on backward via Sum
    Huber(usize, f64),
    /// horizontal concatenation of equal-row matrices
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients for tape leaves, indexed by the leaf's [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf. Leaves that did not
    /// influence the loss get a zero tensor of the leaf's shape.
    pub fn get(&self, v: Var) -> &Tensor {
        self.grads[v.0]
            .as_ref()
            .expect("Gradients::get: not a leaf of this tape")
    }
}

/// Single-use operation recorder.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Register a differentiable leaf (a parameter slot).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    /// `a` is `[n, d]`, `bias` is `[d]` (or `[1, d]`), broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let m = self.value(a);
        let b = self.value(bias);
        if m.cols() != b.numel() {
            return Err(Error::ShapeMismatch(format!(
                "add_row: {:?} + {:?}",
                m.shape(),
                b.shape()
            )));
        }
        let (rows, cols) = (m.rows(), m.cols());
        let mut data = m.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += b.data()[c];
            }
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddRow(a.0, bias.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.needs(a);
        self.push(v, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let v = Tensor { shape: self.value(a).shape().to_vec(), data };
        let rg = self.needs(a);
        self.push(v, Op::Relu(a.0), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let v = Tensor { shape: self.value(a).shape().to_vec(), data };
        let rg = self.needs(a);
        self.push(v, Op::Gelu(a.0), rg)
    }

    /// Sum of all entries; produces a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Elementwise Huber penalty: quadratic inside `±delta`, linear outside.
    /// With a tiny `delta` this is a smooth stand-in for `|x|`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x.abs() < delta {
                    x * x / (2.0 * delta)
                } else {
                    x.abs() - delta / 2.0
                }
            })
            .collect();
        let v = Tensor { shape: self.value(a).shape().to_vec(), data };
        let rg = self.needs(a);
        self.push(v, Op::Huber(a.0, delta), rg)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Tape("concat_cols: empty".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::ShapeMismatch("concat_cols: row mismatch".into()));
            }
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let v = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared entry: `sum(x²)/rows` — the batch-mean of squared row
    /// norms when `a` is a `[batch, dim]` residual matrix.
    pub fn mean_sq_rows(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows() as f64;
        let sq = self.mul(a, a)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / rows))
    }

    /// Batch-mean Huber penalty over rows: `sum(huber(x))/rows`.
    pub fn mean_huber_rows(&mut self, a: Var, delta: f64) -> Var {
        let rows = self.value(a).rows() as f64;
        let h = self.huber(a, delta);
        let s = self.sum(h);
        self.scale(s, 1.0 / rows)
    }

    /// Reverse pass from a scalar loss. Consumes the tape and returns the
    /// gradients of every leaf; leaves the loss never touched get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Tape("backward: loss not on tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Tape(
                "backward: loss is detached from every leaf".into(),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Constant) {
                continue; // adjoint stays in place for final collection
            }
            let Some(g) = adj[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    // dC/dA = g · Bᵀ ; dC/dB = Aᵀ · g, with rank-1 operands
                    // reshaped to the matrix orientation used in forward.
                    let av = as_matrix_left(&self.nodes[a].value);
                    let bv = as_matrix_right(&self.nodes[b].value);
                    let gm = Tensor::matrix(av.rows(), bv.cols(), g.data().to_vec())?;
                    if self.nodes[a].requires_grad {
                        let da = gm.matmul(&bv.transpose())?;
                        accumulate(&mut adj, a, reshape_like(da, &self.nodes[a].value))?;
                    }
                    if self.nodes[b].requires_grad {
                        let db = av.transpose().matmul(&gm)?;
                        accumulate(&mut adj, b, reshape_like(db, &self.nodes[b].value))?;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        accumulate(&mut adj, a, g.clone())?;
                    }
                    if self.nodes[b].requires_grad {
                        accumulate(&mut adj, b, g)?;
                    }
                }
                Op::AddRow(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    if self.nodes[bias].requires_grad {
                        let cols = self.nodes[bias].value.numel();
                        let rows = g.numel() / cols;
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g.data()[r * cols + c];
                            }
                        }
                        let shaped = Tensor {
                            shape: self.nodes[bias].value.shape().to_vec(),
                            data: db,
                        };
                        accumulate(&mut adj, bias, shaped)?;
                    }
                    if self.nodes[a].requires_grad {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        accumulate(&mut adj, a, g.clone())?;
                    }
                    if self.nodes[b].requires_grad {
                        accumulate(&mut adj, b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a].requires_grad {
                        let da = g.mul(&self.nodes[b].value)?;
                        accumulate(&mut adj, a, da)?;
                    }
                    if self.nodes[b].requires_grad {
                        let db = g.mul(&self.nodes[a].value)?;
                        accumulate(&mut adj, b, db)?;
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    if self.nodes[a].requires_grad {
                        accumulate(&mut adj, a, g.scale(c))?;
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    if self.nodes[a].requires_grad {
                        let data = self.nodes[a]
                            .value
                            .data()
                            .iter()
                            .zip(g.data().iter())
                            .map(|(&x, &gg)| if x > 0.0 { gg } else { 0.0 })
                            .collect();
                        let t = Tensor { shape: g.shape().to_vec(), data };
                        accumulate(&mut adj, a, t)?;
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    if self.nodes[a].requires_grad {
                        let data = self.nodes[a]
                            .value
                            .data()
                            .iter()
                            .zip(g.data().iter())
                            .map(|(&x, &gg)| gelu_grad(x) * gg)
                            .collect();
                        let t = Tensor { shape: g.shape().to_vec(), data };
                        accumulate(&mut adj, a, t)?;
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    if self.nodes[a].requires_grad {
                        let gv = g.item();
                        let t = Tensor {
                            shape: self.nodes[a].value.shape().to_vec(),
                            data: vec![gv; self.nodes[a].value.numel()],
                        };
                        accumulate(&mut adj, a, t)?;
                    }
                }
                Op::Huber(a, delta) => {
                    let (a, delta) = (*a, *delta);
                    if self.nodes[a].requires_grad {
                        let data = self.nodes[a]
                            .value
                            .data()
                            .iter()
                            .zip(g.data().iter())
                            .map(|(&x, &gg)| {
                                let d = if x.abs() < delta { x / delta } else { x.signum() };
                                d * gg
                            })
                            .collect();
                        let t = Tensor { shape: g.shape().to_vec(), data };
                        accumulate(&mut adj, a, t)?;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let total = self.nodes[idx].value.cols();
                    let rows = self.nodes[idx].value.rows();
                    let mut off = 0;
                    for p in parts {
                        let c = self.nodes[p].value.cols();
                        if self.nodes[p].requires_grad {
                            let mut data = vec![0.0; rows * c];
                            for r in 0..rows {
                                data[r * c..(r + 1) * c]
                                    .copy_from_slice(&g.data()[r * total + off..r * total + off + c]);
                            }
                            let t = Tensor {
                                shape: self.nodes[p].value.shape().to_vec(),
                                data,
                            };
                            accumulate(&mut adj, p, t)?;
                        }
                        off += c;
                    }
                }
            }
        }

        // Every leaf gets a gradient; untouched leaves get zeros.
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(match adj[idx].take() {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape().to_vec()),
                });
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    adj[idx] = Some(match adj[idx].take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

fn as_matrix_left(t: &Tensor) -> Tensor {
    if t.shape().len() == 1 {
        Tensor { shape: vec![1, t.numel()], data: t.data().to_vec() }
    } else {
        t.clone()
    }
}

fn as_matrix_right(t: &Tensor) -> Tensor {
    if t.shape().len() == 1 {
        Tensor { shape: vec![t.numel(), 1], data: t.data().to_vec() }
    } else {
        t.clone()
    }
}

fn reshape_like(mut t: Tensor, like: &Tensor) -> Tensor {
    t.shape = like.shape().to_vec();
    t
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
