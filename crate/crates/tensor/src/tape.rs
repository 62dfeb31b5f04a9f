//! Dynamic reverse-mode tape.
//!
//! Every operation appends one node whose inputs already live on the tape, so
//! node order is a topological order and [`Tape::backward`] is a single reverse
//! sweep. A tape is built per forward pass and dropped afterwards.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, softmax_row, transpose, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Concat(Vec<usize>),
    Stack(Vec<usize>),
    Slice { src: usize, start: usize },
    Row { src: usize, index: usize },
    Lookup { table: usize, ids: Vec<usize> },
    Tanh(usize),
    Relu(usize),
    Softmax { src: usize, axis: usize },
    MaskedSoftmax(usize),
    Mean { src: usize, axis: Option<usize> },
    Sum(usize),
    Cosine(usize, usize),
    CrossEntropy { logits: usize, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations on [`Var`]s for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    checked: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("checked", &self.checked)
            .finish()
    }
}

/// A handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn checked() -> Self {
        Tape {
            nodes: RefCell::default(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_node(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Differentiates the scalar `loss` with respect to every node.
    ///
    /// A loss that depends on no differentiable leaf yields all-zero
    /// gradients and a warning.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !root.requires_grad {
            log::warn!("backward called on a loss disconnected from every parameter");
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &upstream, &mut grads);
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

/// Adds `delta` into the gradient slot of `target` when it requires one.
fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut grads[target] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape")
}

/// `(rows, cols)` of a matmul operand, treating a vector as a row (`lhs`) or column.
fn mat_dims(t: &Tensor, lhs: bool) -> (usize, usize) {
    match (t.rank(), lhs) {
        (2, _) => (t.shape()[0], t.shape()[1]),
        (_, true) => (1, t.len()),
        (_, false) => (t.len(), 1),
    }
}

/// Index lists for each 1-D lane of `shape` along `axis`.
fn lanes(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    match shape.len() {
        0 => vec![vec![0]],
        1 => vec![(0..shape[0]).collect()],
        _ => {
            let (r, c) = (shape[0], shape[1]);
            if axis == 1 {
                (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect()
            } else {
                (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect()
            }
        }
    }
}

fn propagate(nodes: &[Node], id: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = mat_dims(val(*a), true);
            let (_, n) = mat_dims(val(*b), false);
            if nodes[*a].requires_grad {
                let bt = transpose(val(*b).data(), k, n);
                let da = gemm(up.data(), &bt, m, n, k);
                accumulate(nodes, grads, *a, with_shape(val(*a).shape(), da));
            }
            if nodes[*b].requires_grad {
                let at = transpose(val(*a).data(), m, k);
                let db = gemm(&at, up.data(), k, m, n);
                accumulate(nodes, grads, *b, with_shape(val(*b).shape(), db));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            accumulate(nodes, grads, *a, with_shape(val(*a).shape(), transpose(up.data(), r, c)));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, up.clone());
            accumulate(nodes, grads, *b, up.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, up.clone());
            accumulate(nodes, grads, *b, up.map(|g| -g));
        }
        Op::Mul(a, b) => {
            let da = up.zip_map(val(*b), "mul", |g, y| g * y).expect("shape");
            let db = up.zip_map(val(*a), "mul", |g, x| g * x).expect("shape");
            accumulate(nodes, grads, *a, da);
            accumulate(nodes, grads, *b, db);
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, up.map(|g| g * s)),
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, up.clone());
            let cols = out.cols();
            let mut dr = vec![0.0; cols];
            for r in 0..out.rows() {
                for (d, g) in dr.iter_mut().zip(up.row(r)) {
                    *d += g;
                }
            }
            accumulate(nodes, grads, *row, with_shape(val(*row).shape(), dr));
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                let d = up.data()[offset..offset + len].to_vec();
                accumulate(nodes, grads, p, with_shape(val(p).shape(), d));
                offset += len;
            }
        }
        Op::Stack(rows) => {
            for (i, &p) in rows.iter().enumerate() {
                accumulate(nodes, grads, p, with_shape(val(p).shape(), up.row(i).to_vec()));
            }
        }
        Op::Slice { src, start } => {
            let mut d = vec![0.0; val(*src).len()];
            d[*start..*start + up.len()].copy_from_slice(up.data());
            accumulate(nodes, grads, *src, with_shape(val(*src).shape(), d));
        }
        Op::Row { src, index } => {
            let s = val(*src);
            let c = s.cols();
            let mut d = vec![0.0; s.len()];
            d[index * c..(index + 1) * c].copy_from_slice(up.data());
            accumulate(nodes, grads, *src, with_shape(s.shape(), d));
        }
        Op::Lookup { table, ids } => {
            let t = val(*table);
            let c = t.cols();
            let mut d = vec![0.0; t.len()];
            for (r, &tok) in ids.iter().enumerate() {
                for (dst, g) in d[tok * c..(tok + 1) * c].iter_mut().zip(up.row(r)) {
                    *dst += g;
                }
            }
            accumulate(nodes, grads, *table, with_shape(t.shape(), d));
        }
        Op::Tanh(a) => {
            let d = up.zip_map(out, "tanh", |g, y| g * (1.0 - y * y)).expect("shape");
            accumulate(nodes, grads, *a, d);
        }
        Op::Relu(a) => {
            let d = up
                .zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })
                .expect("shape");
            accumulate(nodes, grads, *a, d);
        }
        Op::Softmax { src, axis } => {
            let mut d = vec![0.0; out.len()];
            for lane in lanes(out.shape(), *axis) {
                let dot: f64 = lane.iter().map(|&j| up.data()[j] * out.data()[j]).sum();
                for &j in &lane {
                    d[j] = out.data()[j] * (up.data()[j] - dot);
                }
            }
            accumulate(nodes, grads, *src, with_shape(out.shape(), d));
        }
        Op::MaskedSoftmax(src) => {
            // Masked entries have probability 0, so the generic softmax rule
            // already gives them zero gradient.
            let mut d = vec![0.0; out.len()];
            for lane in lanes(out.shape(), out.rank().saturating_sub(1)) {
                let dot: f64 = lane.iter().map(|&j| up.data()[j] * out.data()[j]).sum();
                for &j in &lane {
                    d[j] = out.data()[j] * (up.data()[j] - dot);
                }
            }
            accumulate(nodes, grads, *src, with_shape(out.shape(), d));
        }
        Op::Mean { src, axis } => {
            let s = val(*src);
            let mut d = vec![0.0; s.len()];
            match axis {
                None => {
                    let g = up.data()[0] / s.len() as f64;
                    d.iter_mut().for_each(|v| *v = g);
                }
                Some(axis) => {
                    for (k, lane) in lanes(s.shape(), *axis).into_iter().enumerate() {
                        let g = up.data()[k] / lane.len() as f64;
                        for j in lane {
                            d[j] = g;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *src, with_shape(s.shape(), d));
        }
        Op::Sum(a) => {
            let g = up.data()[0];
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g));
        }
        Op::Cosine(u, v) => {
            let (uv, vv) = (val(*u), val(*v));
            let nu = uv.norm();
            let nv = vv.norm();
            let c = out.data()[0];
            let g = up.data()[0];
            let du = uv
                .zip_map(vv, "cosine", |x, y| g * (y / (nu * nv) - c * x / (nu * nu)))
                .expect("shape");
            let dv = vv
                .zip_map(uv, "cosine", |y, x| g * (x / (nu * nv) - c * y / (nv * nv)))
                .expect("shape");
            accumulate(nodes, grads, *u, du);
            accumulate(nodes, grads, *v, dv);
        }
        Op::CrossEntropy { logits, label, probs } => {
            let g = up.data()[0];
            let d = probs
                .iter()
                .enumerate()
                .map(|(k, p)| g * (p - if k == *label { 1.0 } else { 0.0 }))
                .collect();
            accumulate(nodes, grads, *logits, with_shape(val(*logits).shape(), d));
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` is not on a differentiable path to the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn check_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'t>> {
        self.tape.push(name, value, op, &[self.id])
    }

    /// Matrix product. A rank-1 left operand acts as a row vector and a rank-1
    /// right operand as a column vector; the result drops that axis.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(rhs);
        let value = {
            let (a, b) = (self.value(), rhs.value());
            if a.rank() == 0 || b.rank() == 0 || (a.rank() == 1 && b.rank() == 1) {
                return Err(mismatch("matmul", &a, &b));
            }
            let (m, k) = mat_dims(&a, true);
            let (k2, n) = mat_dims(&b, false);
            if k != k2 {
                return Err(mismatch("matmul", &a, &b));
            }
            let data = gemm(a.data(), b.data(), m, k, n);
            let shape = match (a.rank(), b.rank()) {
                (2, 2) => vec![m, n],
                (2, _) => vec![m],
                _ => vec![n],
            };
            Tensor::new(shape, data)?
        };
        self.tape
            .push("matmul", value, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if a.rank() != 2 {
                return Err(TensorError::InvalidShape {
                    shape: a.shape().to_vec(),
                    len: a.len(),
                });
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::new(vec![c, r], transpose(a.data(), r, c))?
        };
        self.unary("transpose", value, Op::Transpose(self.id))
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_tape(rhs);
        let value = self.value().zip_map(&rhs.value(), name, f)?;
        self.tape.push(name, value, op, &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v * s);
        self.unary("scale", value, Op::Scale(self.id, s))
    }

    /// Adds a rank-1 `row` to every row of a matrix, or to a vector of equal length.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(row);
        let value = {
            let (a, r) = (self.value(), row.value());
            if r.rank() != 1 || a.rank() == 0 || a.cols() != r.len() {
                return Err(mismatch("add_row", &a, &r));
            }
            let mut out = a.clone();
            let c = a.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += r.data()[i % c];
            }
            out
        };
        self.tape
            .push("add_row", value, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if a.rank() != 1 || len == 0 || start + len > a.len() {
                return Err(TensorError::IndexOutOfRange {
                    index: start + len,
                    len: a.len(),
                });
            }
            Tensor::vector(a.data()[start..start + len].to_vec())
        };
        self.unary("slice", value, Op::Slice { src: self.id, start })
    }

    pub fn row(&self, index: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if a.rank() != 2 || index >= a.rows() {
                return Err(TensorError::IndexOutOfRange {
                    index,
                    len: a.rows(),
                });
            }
            Tensor::vector(a.row(index).to_vec())
        };
        self.unary("row", value, Op::Row { src: self.id, index })
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        let value = self.value().map(f64::tanh);
        self.unary("tanh", value, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let value = self.value().map(|v| v.max(0.0));
        self.unary("relu", value, Op::Relu(self.id))
    }

    /// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if a.rank() == 0 || axis >= a.rank() {
                return Err(TensorError::InvalidShape {
                    shape: a.shape().to_vec(),
                    len: a.len(),
                });
            }
            let mut out = vec![0.0; a.len()];
            for lane in lanes(a.shape(), axis) {
                let row: Vec<f64> = lane.iter().map(|&j| a.data()[j]).collect();
                let mut probs = vec![0.0; row.len()];
                softmax_row(&row, None, &mut probs)?;
                for (&j, p) in lane.iter().zip(probs) {
                    out[j] = p;
                }
            }
            Tensor::new(a.shape().to_vec(), out)?
        };
        self.unary("softmax", value, Op::Softmax { src: self.id, axis })
    }

    /// Softmax over the last axis where masked-out positions receive exactly
    /// zero probability. Each lane must keep at least one position.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if a.rank() == 0 || mask.len() != a.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: a.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            for r in 0..a.rows() {
                let span = r * c..(r + 1) * c;
                softmax_row(&a.data()[span.clone()], Some(&mask[span.clone()]), &mut out[span])?;
            }
            Tensor::new(a.shape().to_vec(), out)?
        };
        self.unary(
            "masked_softmax",
            value,
            Op::MaskedSoftmax(self.id),
        )
    }

    /// Mean over `axis`, or over every element when `axis` is `None`.
    pub fn mean(&self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            match axis {
                None => Tensor::scalar(a.sum() / a.len() as f64),
                Some(ax) if ax < a.rank() => {
                    let means: Vec<f64> = lanes(a.shape(), ax)
                        .into_iter()
                        .map(|lane| lane.iter().map(|&j| a.data()[j]).sum::<f64>() / lane.len() as f64)
                        .collect();
                    if a.rank() == 1 {
                        Tensor::scalar(means[0])
                    } else {
                        Tensor::vector(means)
                    }
                }
                Some(_) => {
                    return Err(TensorError::InvalidShape {
                        shape: a.shape().to_vec(),
                        len: a.len(),
                    })
                }
            }
        };
        self.unary("mean", value, Op::Mean { src: self.id, axis })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().sum());
        self.unary("sum", value, Op::Sum(self.id))
    }

    /// Cosine similarity of two vectors of equal length.
    pub fn cosine(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        let value = {
            let (u, v) = (self.value(), other.value());
            if u.rank() != 1 || u.shape() != v.shape() {
                return Err(mismatch("cosine", &u, &v));
            }
            let (nu, nv) = (u.norm(), v.norm());
            if nu < 1e-12 || nv < 1e-12 {
                return Err(TensorError::ZeroVector);
            }
            let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            Tensor::scalar((dot / (nu * nv)).clamp(-1.0, 1.0))
        };
        self.tape
            .push("cosine", value, Op::Cosine(self.id, other.id), &[self.id, other.id])
    }

    /// `-log softmax(self)[label]` for a logit vector.
    pub fn cross_entropy(&self, label: usize) -> Result<Var<'t>> {
        let (value, probs) = {
            let a = self.value();
            if a.rank() != 1 {
                return Err(TensorError::InvalidShape {
                    shape: a.shape().to_vec(),
                    len: a.len(),
                });
            }
            if label >= a.len() {
                return Err(TensorError::IndexOutOfRange {
                    index: label,
                    len: a.len(),
                });
            }
            let mut probs = vec![0.0; a.len()];
            softmax_row(a.data(), None, &mut probs)?;
            let max = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + a.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (Tensor::scalar(lse - a.data()[label]), probs)
        };
        self.unary(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits: self.id,
                label,
                probs,
            },
        )
    }

    /// Rows of `self` (a `[V, D]` table) selected by `ids`, as an `[ids.len(), D]` matrix.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let t = self.value();
            if t.rank() != 2 || ids.is_empty() {
                return Err(TensorError::InvalidShape {
                    shape: t.shape().to_vec(),
                    len: ids.len(),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * t.cols());
            for &id in ids {
                if id >= t.rows() {
                    return Err(TensorError::IndexOutOfRange {
                        index: id,
                        len: t.rows(),
                    });
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), t.cols(), data)?
        };
        self.unary(
            "embedding_lookup",
            value,
            Op::Lookup {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }
}

/// Concatenates scalars or vectors end to end into a vector, or matrices with
/// equal column counts row-wise.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(TensorError::InvalidShape {
        shape: vec![],
        len: 0,
    })?;
    let tape = first.tape;
    let value = {
        let head = first.value();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.check_tape(p);
            let v = p.value();
            if v.rank() != head.rank() || v.rank() > 2 || (v.rank() == 2 && v.cols() != head.cols()) {
                return Err(mismatch("concat", &head, &v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        if head.rank() <= 1 {
            Tensor::vector(data)
        } else {
            Tensor::matrix(rows, head.cols(), data)?
        }
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push("concat", value, Op::Concat(ids.clone()), &ids)
}

/// Stacks equal-length vectors as the rows of a matrix.
pub fn stack<'t>(rows: &[Var<'t>]) -> Result<Var<'t>> {
    let first = rows.first().ok_or(TensorError::InvalidShape {
        shape: vec![],
        len: 0,
    })?;
    let tape = first.tape;
    let value = {
        let head = first.value();
        let mut data = Vec::with_capacity(rows.len() * head.len());
        for r in rows {
            first.check_tape(r);
            let v = r.value();
            if v.rank() != 1 || v.len() != head.len() {
                return Err(mismatch("stack", &head, &v));
            }
            data.extend_from_slice(v.data());
        }
        Tensor::matrix(rows.len(), head.len(), data)?
    };
    let ids: Vec<usize> = rows.iter().map(|p| p.id).collect();
    tape.push("stack", value, Op::Stack(ids.clone()), &ids)
}
