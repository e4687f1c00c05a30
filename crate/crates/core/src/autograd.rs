//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids are
//! assigned in creation order, so the tape is always topologically sorted and
//! a single reverse sweep from the loss visits each node once. Nodes whose
//! inputs never require a gradient are stored as plain values without a
//! backward rule.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_shape, expand, for_each_offset, split_axis, strides, sum_to_shape, LinearPlan, Tensor,
};

/// Denominator guard for every vector norm.
pub const NORM_EPS: f64 = 1e-8;

/// Variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Abs,
    Relu,
    Gelu,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, s: T },
    Unary { kind: UnaryKind, a: usize },
    MatMul { a: usize, b: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, axis: usize, xhat: Vec<T>, rstd: Vec<T> },
    Reduce { kind: ReduceKind, a: usize, axis: Option<usize> },
    Max { a: usize, argmax: Vec<usize> },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    CosineDistance { a: usize, b: usize, axis: usize },
    L2Normalize { a: usize, axis: usize },
    Bilinear { a: usize },
    HardShrink { w: usize, lambda: T, eps: T, fallback: Vec<bool> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } => "elementwise",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Unary { .. } => "unary",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reduce { .. } => "reduce",
            Op::Max { .. } => "max",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::CosineDistance { .. } => "cosine_distance",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Bilinear { .. } => "bilinear_resize",
            Op::HardShrink { .. } => "hard_shrink",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    generation: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
    generation: u64,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires one.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&var.id)
    }

    /// Gradient of `var`, or zeros of its shape when nothing reached it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf value.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Arc<Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id,
            generation: self.generation.get(),
        }
    }

    fn record(&self, value: Tensor<T>, inputs: &[&Var<'_, T>], op: Op<T>) -> Var<'_, T> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        self.push(Arc::new(value), requires_grad, op)
    }

    /// Backpropagates from `loss`, then clears the tape.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        self.nodes.borrow_mut().clear();
        self.generation.set(self.generation.get() + 1);
        Ok(grads)
    }

    /// Backpropagates from `loss` and keeps the tape for further sweeps.
    pub fn gradients(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        loss.check();
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (input, contribution) in backward_rule(&nodes, id, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                if contribution.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        node: input,
                        op: node.op.name(),
                    });
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { by_node: leaves })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn check(&self) {
        assert_eq!(
            self.generation,
            self.tape.generation.get(),
            "Var#{} used after its tape was cleared",
            self.id
        );
    }

    fn node(&self) -> Ref<'t, Node<T>> {
        self.check();
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.node().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Same value, detached: nothing upstream receives gradient through it.
    pub fn stop_gradient(&self) -> Var<'t, T> {
        self.tape.leaf_shared(self.value(), false)
    }

    fn binary(&self, other: &Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = binary_forward(kind, &a, &b)?;
        Ok(self.tape.record(out, &[self, other], Op::Binary {
            kind,
            a: self.id,
            b: other.id,
        }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v + s);
        self.tape.record(out, &[self], Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v * s);
        self.tape.record(out, &[self], Op::MulScalar { a: self.id, s })
    }

    pub fn div_scalar(&self, s: f64) -> Var<'t, T> {
        let d = T::of(s);
        let out = self.value().map(|v| v / d);
        self.tape.record(out, &[self], Op::MulScalar {
            a: self.id,
            s: T::one() / d,
        })
    }

    fn unary(&self, kind: UnaryKind) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| unary_forward(kind, v));
        self.tape.record(out, &[self], Op::Unary { kind, a: self.id })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Abs)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Var<'t, T> {
        self.unary(UnaryKind::Log)
    }

    /// Batched matrix product `[..., m, k] · [..., k, n]` with broadcast batch axes.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = matmul_forward(&self.value(), &other.value())?;
        Ok(self.tape.record(out, &[self, other], Op::MatMul {
            a: self.id,
            b: other.id,
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("softmax", x.shape(), axis)?;
        let mut out = x.data().to_vec();
        for_each_lane(outer, n, inner, |lane| {
            let max = lane.iter().map(|&i| out[i]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for &i in lane {
                out[i] = (out[i] - max).exp();
                total += out[i];
            }
            for &i in lane {
                out[i] /= total;
            }
        });
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(out, &[self], Op::Softmax { a: self.id, axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("log_softmax", x.shape(), axis)?;
        let mut out = x.data().to_vec();
        for_each_lane(outer, n, inner, |lane| {
            let max = lane.iter().map(|&i| out[i]).fold(T::neg_infinity(), T::max);
            let lse = max + lane.iter().map(|&i| (out[i] - max).exp()).sum::<T>().ln();
            for &i in lane {
                out[i] -= lse;
            }
        });
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(out, &[self], Op::LogSoftmax { a: self.id, axis }))
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance, then
    /// applies the per-position affine `gamma`, `beta` (both of length `shape[axis]`).
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("layer_norm", x.shape(), axis)?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let eps = T::of(LAYER_NORM_EPS);
        let nt = T::of(n as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        let mut out = vec![T::zero(); x.len()];
        let xs = x.data();
        for_each_lane(outer, n, inner, |lane| {
            let mean = lane.iter().map(|&i| xs[i]).sum::<T>() / nt;
            let var = lane.iter().map(|&i| (xs[i] - mean) * (xs[i] - mean)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (k, &i) in lane.iter().enumerate() {
                xhat[i] = (xs[i] - mean) * r;
                out[i] = xhat[i] * g.data()[k] + b.data()[k];
            }
        });
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(out, &[self, gamma, beta], Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            axis,
            xhat,
            rstd,
        }))
    }

    fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = match axis {
            None => {
                let total: T = x.data().iter().copied().sum();
                let v = match kind {
                    ReduceKind::Sum => total,
                    ReduceKind::Mean => total / T::of(x.len() as f64),
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                let (outer, n, inner) = split_axis("reduce", x.shape(), axis)?;
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for j in 0..inner {
                        let total: T = (0..n).map(|i| x.data()[(o * n + i) * inner + j]).sum();
                        out.push(match kind {
                            ReduceKind::Sum => total,
                            ReduceKind::Mean => total / T::of(n as f64),
                        });
                    }
                }
                let mut shape = x.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        Ok(self.tape.record(out, &[self], Op::Reduce {
            kind,
            a: self.id,
            axis,
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        self.reduce(ReduceKind::Sum, None).expect("full reduction")
    }

    pub fn mean(&self) -> Var<'t, T> {
        self.reduce(ReduceKind::Mean, None).expect("full reduction")
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Sum, Some(axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Mean, Some(axis))
    }

    /// Maximum over everything (`axis = None`) or one axis. The gradient goes
    /// to the first maximal element in row-major order.
    pub fn max(&self, axis: Option<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner, shape) = match axis {
            None => (1, x.len(), 1, vec![]),
            Some(axis) => {
                let (o, n, i) = split_axis("max", x.shape(), axis)?;
                let mut s = x.shape().to_vec();
                s.remove(axis);
                (o, n, i, s)
            }
        };
        if n == 0 {
            return Err(Error::InvalidArgument("max over an empty axis".into()));
        }
        let mut argmax = Vec::with_capacity(outer * inner);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = (o * n) * inner + j;
                for i in 1..n {
                    let idx = (o * n + i) * inner + j;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                argmax.push(best);
                out.push(x.data()[best]);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.tape.record(out, &[self], Op::Max { a: self.id, argmax }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(out, &[self], Op::Reshape { a: self.id }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(perm)?;
        Ok(self.tape.record(out, &[self], Op::Permute {
            a: self.id,
            perm: perm.to_vec(),
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t, T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose_last",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// `1 − ⟨a,b⟩ / (‖a‖‖b‖ + ε)` along `axis`; the axis is removed.
    pub fn cosine_distance(&self, other: &Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine_distance",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (outer, n, inner) = split_axis("cosine_distance", a.shape(), axis)?;
        let eps = T::of(NORM_EPS);
        let mut out = Vec::with_capacity(outer * inner);
        for_each_lane(outer, n, inner, |lane| {
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for &i in lane {
                let (x, y) = (a.data()[i], b.data()[i]);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            out.push(T::one() - dot / (na.sqrt() * nb.sqrt() + eps));
        });
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.tape.record(out, &[self, other], Op::CosineDistance {
            a: self.id,
            b: other.id,
            axis,
        }))
    }

    /// `x / (‖x‖ + ε)` along `axis`.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("l2_normalize", x.shape(), axis)?;
        let eps = T::of(NORM_EPS);
        let mut out = x.data().to_vec();
        for_each_lane(outer, n, inner, |lane| {
            let norm = lane.iter().map(|&i| out[i] * out[i]).sum::<T>().sqrt();
            for &i in lane {
                out[i] /= norm + eps;
            }
        });
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(out, &[self], Op::L2Normalize { a: self.id, axis }))
    }

    /// Bilinear resampling of the last two axes (align-corners=false).
    pub fn bilinear_resize(&self, target: (usize, usize)) -> Result<Var<'t, T>> {
        let out = crate::tensor::bilinear_resize(&self.value(), target)?;
        Ok(self.tape.record(out, &[self], Op::Bilinear { a: self.id }))
    }

    /// Sparse shrinkage of convex weights along the last axis:
    /// `s_i = relu(w_i − λ)·w_i / (|w_i − λ| + ε)`, renormalized to sum 1.
    /// Rows in which every weight is `≤ λ` pass through unchanged.
    pub fn hard_shrink(&self, lambda: f64, eps: f64) -> Result<Var<'t, T>> {
        let w = self.value();
        let n = *w.shape().last().ok_or_else(|| Error::InvalidArgument("hard_shrink on a scalar".into()))?;
        let (lam, e) = (T::of(lambda), T::of(eps));
        let mut out = Vec::with_capacity(w.len());
        let mut fallback = Vec::with_capacity(w.len() / n.max(1));
        for row in w.data().chunks(n) {
            let shrunk: Vec<T> = row.iter().map(|&v| shrink_value(v, lam, e)).collect();
            let total: T = shrunk.iter().copied().sum();
            if total > T::zero() {
                fallback.push(false);
                out.extend(shrunk.into_iter().map(|s| s / total));
            } else {
                log::debug!("hard_shrink: every weight <= {lambda}, keeping the dense row");
                fallback.push(true);
                out.extend_from_slice(row);
            }
        }
        let out = Tensor::new(w.shape().to_vec(), out)?;
        Ok(self.tape.record(out, &[self], Op::HardShrink {
            w: self.id,
            lambda: lam,
            eps: e,
            fallback,
        }))
    }
}

fn shrink_value<T: Scalar>(w: T, lambda: T, eps: T) -> T {
    let d = w - lambda;
    if d > T::zero() {
        d * w / (d + eps)
    } else {
        T::zero()
    }
}

fn shrink_derivative<T: Scalar>(w: T, lambda: T, eps: T) -> T {
    let d = w - lambda;
    if d > T::zero() {
        let den = d + eps;
        ((w + d) * den - d * w) / (den * den)
    } else {
        T::zero()
    }
}

/// Calls `f` with the flat indices of each lane along the split axis.
fn for_each_lane(outer: usize, n: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = vec![0; n];
    for o in 0..outer {
        for j in 0..inner {
            for (i, slot) in lane.iter_mut().enumerate() {
                *slot = (o * n + i) * inner + j;
            }
            f(&lane);
        }
    }
}

fn unary_forward<T: Scalar>(kind: UnaryKind, v: T) -> T {
    match kind {
        UnaryKind::Neg => -v,
        UnaryKind::Abs => v.abs(),
        UnaryKind::Relu => v.max(T::zero()),
        UnaryKind::Gelu => {
            let u = T::of((2.0 / std::f64::consts::PI).sqrt()) * (v + T::of(0.044715) * v * v * v);
            T::of(0.5) * v * (T::one() + u.tanh())
        }
        UnaryKind::Exp => v.exp(),
        UnaryKind::Log => v.ln(),
    }
}

fn unary_derivative<T: Scalar>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Gelu => {
            let c = T::of((2.0 / std::f64::consts::PI).sqrt());
            let k = T::of(0.044715);
            let t = (c * (x + k * x * x * x)).tanh();
            T::of(0.5) * (T::one() + t)
                + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
        }
        UnaryKind::Exp => y,
        UnaryKind::Log => T::one() / x,
    }
}

fn apply_binary<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

/// Elementwise arithmetic with trailing-dimension broadcasting.
pub fn binary_forward<T: Scalar>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let op = match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    };
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let data: Vec<T> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| apply_binary(kind, x, y)).collect()
    } else if a.shape() == shape.as_slice() && shape.ends_with(b.shape()) {
        let m = b.len().max(1);
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| apply_binary(kind, x, b.data()[i % m]))
            .collect()
    } else {
        let (ea, eb) = (expand(a, &shape), expand(b, &shape));
        ea.iter().zip(&eb).map(|(&x, &y)| apply_binary(kind, x, y)).collect()
    };
    Tensor::new(shape, data)
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// per output batch: (a matrix index, b matrix index)
    pairs: Vec<(usize, usize)>,
    /// `b` is a single matrix shared by every batch and `a` can be flattened
    shared_rhs: bool,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let shared_rhs = bb.iter().product::<usize>() == 1 && ba.len() >= bb.len();
    let sa = crate::tensor::broadcast_strides(ba, &batch);
    let sb = crate::tensor::broadcast_strides(bb, &batch);
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    for_each_offset(&batch, &sa, |o| ia.push(o));
    for_each_offset(&batch, &sb, |o| ib.push(o));
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs: ia.into_iter().zip(ib).collect(),
        shared_rhs,
    })
}

pub fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); p.out_shape.iter().product()];
    let (ki, ni) = (k as isize, n as isize);
    if p.shared_rhs {
        let rows = p.pairs.len() * m;
        T::gemm(rows, k, n, a.data(), (ki, 1), b.data(), (ni, 1), &mut out, (ni, 1), false);
    } else {
        for (bi, &(ia, ib)) in p.pairs.iter().enumerate() {
            T::gemm(
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                (ki, 1),
                &b.data()[ib * k * n..(ib + 1) * k * n],
                (ni, 1),
                &mut out[bi * m * n..(bi + 1) * m * n],
                (ni, 1),
                false,
            );
        }
    }
    Tensor::new(p.out_shape, out)
}

fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let (ki, ni) = (k as isize, n as isize);
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    if p.shared_rhs {
        let rows = p.pairs.len() * m;
        // ga = g · bᵀ ; gb = aᵀ · g
        T::gemm(rows, n, k, g, (ni, 1), b.data(), (1, ni), &mut ga, (ki, 1), false);
        T::gemm(k, rows, n, a.data(), (1, ki), g, (ni, 1), &mut gb, (ni, 1), false);
    } else {
        for (bi, &(ia, ib)) in p.pairs.iter().enumerate() {
            let gs = &g[bi * m * n..(bi + 1) * m * n];
            T::gemm(
                m,
                n,
                k,
                gs,
                (ni, 1),
                &b.data()[ib * k * n..(ib + 1) * k * n],
                (1, ni),
                &mut ga[ia * m * k..(ia + 1) * m * k],
                (ki, 1),
                true,
            );
            T::gemm(
                k,
                m,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                (1, ki),
                gs,
                (ni, 1),
                &mut gb[ib * k * n..(ib + 1) * k * n],
                (ni, 1),
                true,
            );
        }
    }
    Ok((ga, gb))
}

fn backward_rule<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let wants = |i: usize| nodes[i].requires_grad;
    let out_shape = node.value.shape();
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let mut res = Vec::new();
            let need_values = matches!(kind, BinaryKind::Mul | BinaryKind::Div);
            let (ea, eb) = if need_values {
                (expand(av, out_shape), expand(bv, out_shape))
            } else {
                (vec![], vec![])
            };
            if wants(*a) {
                let full: Vec<T> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => g.iter().zip(&eb).map(|(&g, &y)| g * y).collect(),
                    BinaryKind::Div => g.iter().zip(&eb).map(|(&g, &y)| g / y).collect(),
                };
                res.push((*a, sum_to_shape(&full, out_shape, av.shape())));
            }
            if wants(*b) {
                let full: Vec<T> = match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|&g| -g).collect(),
                    BinaryKind::Mul => g.iter().zip(&ea).map(|(&g, &x)| g * x).collect(),
                    BinaryKind::Div => g
                        .iter()
                        .zip(ea.iter().zip(&eb))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect(),
                };
                res.push((*b, sum_to_shape(&full, out_shape, bv.shape())));
            }
            res
        }
        Op::AddScalar { a } => vec![(*a, g.to_vec())],
        Op::MulScalar { a, s } => vec![(*a, g.iter().map(|&g| g * *s).collect())],
        Op::Unary { kind, a } => {
            let x = val(*a).data();
            let y = node.value.data();
            vec![(
                *a,
                g.iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * unary_derivative(*kind, x, y))
                    .collect(),
            )]
        }
        Op::MatMul { a, b } => {
            let (ga, gb) = matmul_backward(val(*a), val(*b), g)?;
            let mut res = Vec::new();
            if wants(*a) {
                res.push((*a, ga));
            }
            if wants(*b) {
                res.push((*b, gb));
            }
            res
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis("softmax", out_shape, *axis)?;
            let mut gx = vec![T::zero(); y.len()];
            for_each_lane(outer, n, inner, |lane| {
                let dot: T = lane.iter().map(|&i| g[i] * y[i]).sum();
                for &i in lane {
                    gx[i] = y[i] * (g[i] - dot);
                }
            });
            vec![(*a, gx)]
        }
        Op::LogSoftmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis("log_softmax", out_shape, *axis)?;
            let mut gx = vec![T::zero(); y.len()];
            for_each_lane(outer, n, inner, |lane| {
                let total: T = lane.iter().map(|&i| g[i]).sum();
                for &i in lane {
                    gx[i] = g[i] - y[i].exp() * total;
                }
            });
            vec![(*a, gx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            rstd,
        } => {
            let (outer, n, inner) = split_axis("layer_norm", out_shape, *axis)?;
            let gam = val(*gamma).data();
            let nt = T::of(n as f64);
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); n];
            let mut gbeta = vec![T::zero(); n];
            let mut lane_idx = 0;
            for_each_lane(outer, n, inner, |lane| {
                let r = rstd[lane_idx];
                lane_idx += 1;
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for (k, &i) in lane.iter().enumerate() {
                    let gh = g[i] * gam[k];
                    s1 += gh;
                    s2 += gh * xhat[i];
                    gg[k] += g[i] * xhat[i];
                    gbeta[k] += g[i];
                }
                for (k, &i) in lane.iter().enumerate() {
                    let gh = g[i] * gam[k];
                    gx[i] = r / nt * (nt * gh - s1 - xhat[i] * s2);
                }
            });
            let mut res = Vec::new();
            if wants(*x) {
                res.push((*x, gx));
            }
            if wants(*gamma) {
                res.push((*gamma, gg));
            }
            if wants(*beta) {
                res.push((*beta, gbeta));
            }
            res
        }
        Op::Reduce { kind, a, axis } => {
            let in_shape = val(*a).shape();
            let gx = match axis {
                None => {
                    let scale = match kind {
                        ReduceKind::Sum => g[0],
                        ReduceKind::Mean => g[0] / T::of(val(*a).len() as f64),
                    };
                    vec![scale; val(*a).len()]
                }
                Some(axis) => {
                    let (outer, n, inner) = split_axis("reduce", in_shape, *axis)?;
                    let div = match kind {
                        ReduceKind::Sum => T::one(),
                        ReduceKind::Mean => T::of(n as f64),
                    };
                    let mut gx = vec![T::zero(); val(*a).len()];
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                gx[(o * n + i) * inner + j] = g[o * inner + j] / div;
                            }
                        }
                    }
                    gx
                }
            };
            vec![(*a, gx)]
        }
        Op::Max { a, argmax } => {
            let mut gx = vec![T::zero(); val(*a).len()];
            for (&src, &gv) in argmax.iter().zip(g) {
                gx[src] += gv;
            }
            vec![(*a, gx)]
        }
        Op::Reshape { a } => vec![(*a, g.to_vec())],
        Op::Permute { a, perm } => {
            // scatter back: output position -> input offset
            let in_strides = strides(val(*a).shape());
            let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut gx = vec![T::zero(); g.len()];
            let mut i = 0;
            for_each_offset(out_shape, &src, |off| {
                gx[off] = g[i];
                i += 1;
            });
            vec![(*a, gx)]
        }
        Op::CosineDistance { a, b, axis } => {
            let (av, bv) = (val(*a), val(*b));
            let (outer, n, inner) = split_axis("cosine_distance", av.shape(), *axis)?;
            let eps = T::of(NORM_EPS);
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            let mut k = 0;
            for_each_lane(outer, n, inner, |lane| {
                let (mut dot, mut sa, mut sb) = (T::zero(), T::zero(), T::zero());
                for &i in lane {
                    let (x, y) = (av.data()[i], bv.data()[i]);
                    dot += x * y;
                    sa += x * x;
                    sb += y * y;
                }
                let (na, nb) = (sa.sqrt(), sb.sqrt());
                let den = na * nb + eps;
                let go = g[k];
                k += 1;
                // d(1 - dot/den): -[y/den - dot·nb·x/(na·den²)]
                let ca = if na > T::zero() { dot * nb / (na * den * den) } else { T::zero() };
                let cb = if nb > T::zero() { dot * na / (nb * den * den) } else { T::zero() };
                for &i in lane {
                    let (x, y) = (av.data()[i], bv.data()[i]);
                    ga[i] = -go * (y / den - ca * x);
                    gb[i] = -go * (x / den - cb * y);
                }
            });
            let mut res = Vec::new();
            if wants(*a) {
                res.push((*a, ga));
            }
            if wants(*b) {
                res.push((*b, gb));
            }
            res
        }
        Op::L2Normalize { a, axis } => {
            let x = val(*a);
            let (outer, n, inner) = split_axis("l2_normalize", x.shape(), *axis)?;
            let eps = T::of(NORM_EPS);
            let mut gx = vec![T::zero(); x.len()];
            for_each_lane(outer, n, inner, |lane| {
                let norm = lane.iter().map(|&i| x.data()[i] * x.data()[i]).sum::<T>().sqrt();
                let den = norm + eps;
                let xg: T = lane.iter().map(|&i| x.data()[i] * g[i]).sum();
                let c = if norm > T::zero() { xg / (norm * den * den) } else { T::zero() };
                for &i in lane {
                    gx[i] = g[i] / den - c * x.data()[i];
                }
            });
            vec![(*a, gx)]
        }
        Op::Bilinear { a } => {
            let x = val(*a);
            let r = x.rank();
            let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
            let (th, tw) = (out_shape[r - 2], out_shape[r - 1]);
            let rows = LinearPlan::<T>::new(h, th);
            let cols = LinearPlan::<T>::new(w, tw);
            let planes = x.len() / (h * w);
            let mut gx = vec![T::zero(); x.len()];
            for p in 0..planes {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                let src = &g[p * th * tw..(p + 1) * th * tw];
                for (oi, &(r0, r1, wr0, wr1)) in rows.taps.iter().enumerate() {
                    for (oj, &(c0, c1, wc0, wc1)) in cols.taps.iter().enumerate() {
                        let gv = src[oi * tw + oj];
                        dst[r0 * w + c0] += gv * wr0 * wc0;
                        dst[r0 * w + c1] += gv * wr0 * wc1;
                        dst[r1 * w + c0] += gv * wr1 * wc0;
                        dst[r1 * w + c1] += gv * wr1 * wc1;
                    }
                }
            }
            vec![(*a, gx)]
        }
        Op::HardShrink {
            w,
            lambda,
            eps,
            fallback,
        } => {
            let wv = val(*w);
            let n = *wv.shape().last().expect("rank >= 1");
            let y = node.value.data();
            let mut gw = vec![T::zero(); wv.len()];
            for (r, &fb) in fallback.iter().enumerate() {
                let span = r * n..(r + 1) * n;
                if fb {
                    gw[span.clone()].copy_from_slice(&g[span]);
                    continue;
                }
                let row = &wv.data()[span.clone()];
                let total: T = row.iter().map(|&v| shrink_value(v, *lambda, *eps)).sum();
                let dot: T = g[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                for i in 0..n {
                    let gs = (g[r * n + i] - dot) / total;
                    gw[r * n + i] = gs * shrink_derivative(row[i], *lambda, *eps);
                }
            }
            vec![(*w, gw)]
        }
    })
}
