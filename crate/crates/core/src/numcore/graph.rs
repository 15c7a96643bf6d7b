//! Tape recording differentiable array operations.
//!
//! Every op appends a node whose inputs are earlier nodes, so reverse
//! creation order is a reverse topological order and backward is a single
//! sweep over the node list.

use std::fmt;

use super::kernels;
use super::{Array, Scalar};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier for each differentiable operation the core knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    MatMulTransposed,
    Add,
    AddRow,
    Mul,
    Scale,
    Sigmoid,
    Gelu,
    Tanh,
    Softmax,
    LogSoftmax,
    LayerNorm,
    GatherRows,
    Concat,
    MaskedWeightedSum,
    Sum,
    Custom(&'static str),
}

/// Backward rule for an operation defined outside the core (CTC, aggregation).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Array<T>], output: &Array<T>, grad_output: &Array<T>)
        -> Vec<Array<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    MatMul(VarId, VarId),
    MatMulTransposed(VarId, VarId),
    Add { a: VarId, b: VarId, broadcast_b: bool },
    AddRow(VarId, VarId),
    Mul { a: VarId, b: VarId, broadcast_b: bool },
    Scale(VarId, T),
    Sigmoid(VarId),
    Gelu(VarId),
    Tanh(VarId),
    Softmax(VarId),
    LogSoftmax(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    GatherRows(VarId, Vec<usize>),
    Concat { inputs: Vec<VarId>, axis: usize },
    MaskedWeightedSum { values: VarId, weights: VarId, mask: Array<T> },
    Sum(VarId),
    Custom { inputs: Vec<VarId>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulTransposed(..) => OpKind::MatMulTransposed,
            Op::Add { .. } => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Concat { .. } => OpKind::Concat,
            Op::MaskedWeightedSum { .. } => OpKind::MaskedWeightedSum,
            Op::Sum(_) => OpKind::Sum,
            Op::Custom { op, .. } => OpKind::Custom(op.name()),
        }
    }
}

struct Node<T: Scalar> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Untaped graphs keep values only; forward results
/// are identical either way.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    taping: bool,
    backward_done: bool,
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("taping", &self.taping)
            .finish()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(op, format!("{a:?} vs {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            taping: true,
            backward_done: false,
        }
    }

    pub fn untaped() -> Self {
        Self {
            taping: false,
            ..Self::new()
        }
    }

    pub fn is_taping(&self) -> bool {
        self.taping
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, id: VarId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: VarId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, value: Array<T>) -> VarId {
        let needs_grad = self.taping;
        self.push_raw(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Array<T>) -> VarId {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, inputs: &[VarId]) -> VarId {
        let needs_grad = self.taping && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let op = if needs_grad { op } else { Op::Constant };
        self.push_raw(value, op, needs_grad)
    }

    fn matrix_dims(&self, op: &'static str, id: VarId) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shapes("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a (m×k) · bᵀ` with `b` of shape `n×k`.
    pub fn matmul_transposed(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.matrix_dims("matmul_transposed", a)?;
        let (n, k2) = self.matrix_dims("matmul_transposed", b)?;
        if k != k2 {
            return Err(shapes(
                "matmul_transposed",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(
            Array::from_parts(vec![m, n], out),
            Op::MatMulTransposed(a, b),
            &[a, b],
        ))
    }

    /// Elementwise sum of equal shapes, or `b` broadcast when it is a scalar.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = if self.value(a).is_scalar() && !self.value(b).is_scalar() {
            (b, a)
        } else {
            (a, b)
        };
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast_b = va.shape() != vb.shape();
        if broadcast_b && !vb.is_scalar() {
            return Err(shapes("add", va.shape(), vb.shape()));
        }
        let data = if broadcast_b {
            let s = vb.item();
            va.data().iter().map(|&x| x + s).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect()
        };
        let out = Array::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Add { a, b, broadcast_b }, &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.len() != va.cols() {
            return Err(shapes("add_row", va.shape(), vr.shape()));
        }
        let c = va.cols();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, &r) in chunk.iter_mut().zip(vr.data()) {
                *x += r;
            }
        }
        let out = Array::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Elementwise product of equal shapes, or `b` broadcast when it is a scalar.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = if self.value(a).is_scalar() && !self.value(b).is_scalar() {
            (b, a)
        } else {
            (a, b)
        };
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast_b = va.shape() != vb.shape();
        if broadcast_b && !vb.is_scalar() {
            return Err(shapes("mul", va.shape(), vb.shape()));
        }
        let data = if broadcast_b {
            let s = vb.item();
            va.data().iter().map(|&x| x * s).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect()
        };
        let out = Array::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul { a, b, broadcast_b }, &[a, b]))
    }

    pub fn scale(&mut self, a: VarId, k: T) -> VarId {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(T::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let c = va.cols();
        let mut data = vec![T::zero(); va.len()];
        for (x, o) in va.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            kernels::softmax_row(x, o);
        }
        let out = Array::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let c = va.cols();
        let mut data = vec![T::zero(); va.len()];
        for (x, o) in va.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            kernels::log_softmax_row(x, o);
        }
        let out = Array::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: T) -> Result<VarId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        if vg.len() != c || vb.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let n = T::of(c as f64);
        let rows = vx.rows();
        let mut normalized = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                normalized[r * c + j] = xh;
                data[r * c + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Array::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: VarId, indices: &[usize]) -> Result<VarId> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {:?}", va.shape()),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(va.row(i));
        }
        let out = Array::from_parts(vec![indices.len(), c], data);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[VarId], axis: usize) -> Result<VarId> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} inputs, axis {axis}", inputs.len())));
        }
        let dims: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&i| self.matrix_dims("concat", i))
            .collect::<Result<_>>()?;
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat", format!("column extents {dims:?}")));
            }
            let mut data = Vec::new();
            for &i in inputs {
                data.extend_from_slice(self.value(i).data());
            }
            let r = dims.iter().map(|d| d.0).sum();
            Array::from_parts(vec![r, c], data)
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat", format!("row extents {dims:?}")));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * c);
            for row in 0..r {
                for &i in inputs {
                    data.extend_from_slice(self.value(i).row(row));
                }
            }
            Array::from_parts(vec![r, c], data)
        };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `out_i = Σ_t mask[i,t] · w_t · values_t` for `values` (n×d), `w` (n) and
    /// a constant `mask` (m×n).
    pub fn masked_weighted_sum(
        &mut self,
        values: VarId,
        weights: VarId,
        mask: Array<T>,
    ) -> Result<VarId> {
        let (vv, vw) = (self.value(values), self.value(weights));
        let (n, d) = (vv.rows(), vv.cols());
        if vw.len() != n || mask.ndim() != 2 || mask.cols() != n {
            return Err(Error::shape(
                "masked_weighted_sum",
                format!(
                    "values {:?}, weights {:?}, mask {:?}",
                    vv.shape(),
                    vw.shape(),
                    mask.shape()
                ),
            ));
        }
        let m = mask.rows();
        let mut data = vec![T::zero(); m * d];
        for i in 0..m {
            let orow = &mut data[i * d..(i + 1) * d];
            for t in 0..n {
                let coef = mask.at(i, t) * vw.data()[t];
                if coef != T::zero() {
                    kernels::axpy(coef, vv.row(t), orow);
                }
            }
        }
        let out = Array::from_parts(vec![m, d], data);
        Ok(self.push(
            out,
            Op::MaskedWeightedSum {
                values,
                weights,
                mask,
            },
            &[values, weights],
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let out = Array::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[VarId],
        output: Array<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> VarId {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar loss; gradients for every leaf.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients<T>> {
        if !self.taping {
            return Err(Error::NotTaped);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::from_parts(loss_shape, vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        let mut leaves = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| node.value.zeros_like());
                leaves.push((VarId(idx), g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], id: VarId, g: Array<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].needs_grad {
                    let da = kernels::matmul_nt(g.data(), vb.data(), m, n, k);
                    self.accumulate(grads, *a, Array::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let db = kernels::matmul_tn(va.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Array::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulTransposed(a, b) => {
                // C = A·Bᵀ, A m×k, B n×k
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.nodes[a.0].needs_grad {
                    let da = kernels::matmul(g.data(), vb.data(), m, n, k);
                    self.accumulate(grads, *a, Array::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let db = kernels::matmul_tn(g.data(), va.data(), m, n, k);
                    self.accumulate(grads, *b, Array::from_parts(vec![n, k], db));
                }
            }
            Op::Add { a, b, broadcast_b } => {
                self.accumulate(grads, *a, g.clone());
                if *broadcast_b {
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Array::from_parts(shape, vec![g.sum()]));
                } else {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[row.0].needs_grad {
                    let c = g.cols();
                    let mut dr = vec![T::zero(); c];
                    for chunk in g.data().chunks_exact(c) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Array::from_parts(shape, dr));
                }
            }
            Op::Mul { a, b, broadcast_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if *broadcast_b {
                    let s = vb.item();
                    self.accumulate(grads, *a, g.map(|x| x * s));
                    let db: T = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).sum();
                    self.accumulate(grads, *b, Array::from_parts(vb.shape().to_vec(), vec![db]));
                } else {
                    let da = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    let db = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Array::from_parts(g.shape().to_vec(), da));
                    self.accumulate(grads, *b, Array::from_parts(g.shape().to_vec(), db));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *a, Array::from_parts(g.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *a, Array::from_parts(g.shape().to_vec(), d));
            }
            Op::Gelu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Array::from_parts(g.shape().to_vec(), d));
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = vec![T::zero(); out.len()];
                for ((gy, y), dx) in g
                    .data()
                    .chunks_exact(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(d.chunks_exact_mut(c))
                {
                    let s = kernels::dot(gy, y);
                    for j in 0..c {
                        dx[j] = y[j] * (gy[j] - s);
                    }
                }
                self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), d));
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut d = vec![T::zero(); out.len()];
                for ((gy, y), dx) in g
                    .data()
                    .chunks_exact(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(d.chunks_exact_mut(c))
                {
                    let s: T = gy.iter().copied().sum();
                    for j in 0..c {
                        dx[j] = gy[j] - y[j].exp() * s;
                    }
                }
                self.accumulate(grads, *a, Array::from_parts(out.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let vg = self.value(*gain);
                let c = out.cols();
                let rows = out.rows();
                let n = T::of(c as f64);
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut dx = vec![T::zero(); out.len()];
                for r in 0..rows {
                    let gy = &g.data()[r * c..(r + 1) * c];
                    let xh = &normalized[r * c..(r + 1) * c];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..c {
                        dgain[j] += gy[j] * xh[j];
                        dbias[j] += gy[j];
                        let dxh = gy[j] * vg.data()[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= n;
                    mean_dxh_xh /= n;
                    for j in 0..c {
                        let dxh = gy[j] * vg.data()[j];
                        dx[r * c + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, Array::from_parts(out.shape().to_vec(), dx));
                let gs = vg.shape().to_vec();
                let bs = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *gain, Array::from_parts(gs, dgain));
                self.accumulate(grads, *bias, Array::from_parts(bs, dbias));
            }
            Op::GatherRows(a, indices) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut d = vec![T::zero(); va.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for (dv, &gv) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *a, Array::from_parts(va.shape().to_vec(), d));
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &i in inputs {
                        let v = self.value(i);
                        let n = v.len();
                        let part = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        self.accumulate(grads, i, Array::from_parts(v.shape().to_vec(), part));
                    }
                } else {
                    let r = g.rows();
                    let mut col = 0;
                    for &i in inputs {
                        let v = self.value(i);
                        let c = v.cols();
                        let mut part = Vec::with_capacity(r * c);
                        for row in 0..r {
                            part.extend_from_slice(&g.row(row)[col..col + c]);
                        }
                        col += c;
                        self.accumulate(grads, i, Array::from_parts(v.shape().to_vec(), part));
                    }
                }
            }
            Op::MaskedWeightedSum {
                values,
                weights,
                mask,
            } => {
                let (vv, vw) = (self.value(*values), self.value(*weights));
                let (n, d) = (vv.rows(), vv.cols());
                let m = mask.rows();
                let mut dv = vec![T::zero(); n * d];
                let mut dw = vec![T::zero(); n];
                for i in 0..m {
                    let gi = g.row(i);
                    for t in 0..n {
                        let mk = mask.at(i, t);
                        if mk == T::zero() {
                            continue;
                        }
                        kernels::axpy(mk * vw.data()[t], gi, &mut dv[t * d..(t + 1) * d]);
                        dw[t] += mk * kernels::dot(gi, vv.row(t));
                    }
                }
                self.accumulate(grads, *values, Array::from_parts(vv.shape().to_vec(), dv));
                self.accumulate(grads, *weights, Array::from_parts(vw.shape().to_vec(), dw));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let s = g.item();
                self.accumulate(grads, *a, Array::from_parts(va.shape().to_vec(), vec![s; va.len()]));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Array<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(&ins, out, g);
                for (&i, gi) in inputs.iter().zip(gs) {
                    self.accumulate(grads, i, gi);
                }
            }
        }
    }
}

/// Gradients of a scalar loss with respect to each leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(VarId, Array<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Array<T>> {
        self.leaves
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| &self.leaves[k].1)
    }

    pub fn take(&mut self, id: VarId) -> Option<Array<T>> {
        let k = self.leaves.binary_search_by_key(&id, |(i, _)| *i).ok()?;
        Some(std::mem::replace(
            &mut self.leaves[k].1,
            Array::scalar(T::zero()),
        ))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
