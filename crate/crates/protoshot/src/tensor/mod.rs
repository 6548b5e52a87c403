//! Reverse-mode automatic differentiation over dense n-dimensional tensors.
//!
//! A `Tensor` is an immutable value plus, when it results from an operation on
//! gradient-tracked inputs, a node pointing back at that operation. Backward
//! rules are themselves written in terms of tensor operations, so running
//! [`autograd::grad`] with `create_graph = true` produces gradients that can be
//! differentiated again — which is what second-order meta-updates need.
//!
//! Tensors are immutable and cheaply cloneable (shared storage). A graph is a
//! DAG of such values; distinct graphs can live on distinct threads.

mod autograd;
pub mod fdcheck;
pub mod ops;

pub use autograd::{grad, GradMap};
pub use fdcheck::{finite_difference_grad, max_rel_err};

use crate::error::{Error, Result};
use crate::scalar::Real;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Named parameter collection, ordered for deterministic iteration.
pub type NamedTensors<R> = BTreeMap<String, Tensor<R>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// The primitive operations the engine knows how to differentiate.
///
/// Everything else (layer norm, losses, distances) is composed from these, so
/// backward rules only exist for this closed set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Op<R> {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar(R),
    MulScalar(R),
    Matmul,
    Transpose,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    ClampMin(R),
    SumTo,
    BroadcastTo,
    Reshape,
}

impl<R> Op<R> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::ClampMin(_) => "clamp_min",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast_to",
            Op::Reshape => "reshape",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<R: Real> {
    pub(crate) op: Op<R>,
    pub(crate) inputs: Vec<Tensor<R>>,
}

#[derive(Debug)]
struct Inner<R: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<R>,
    requires_grad: bool,
    node: Option<Node<R>>,
}

/// Immutable n-dimensional value, optionally part of a computation graph.
#[derive(Debug, Clone)]
pub struct Tensor<R: Real>(Arc<Inner<R>>);

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast compatibility: `from` must match `to` in every
/// trailing dimension or be 1 there.
fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == to[offset + i] || d == 1)
}

/// Broadcast shape of two operands, if one exists.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

impl<R: Real> Tensor<R> {
    fn new(shape: Vec<usize>, data: Vec<R>, requires_grad: bool, node: Option<Node<R>>) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new(shape.to_vec(), data, false, None))
    }

    /// Gradient-tracked leaf.
    pub fn leaf(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::new(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn scalar(v: R) -> Self {
        Self::new(vec![], vec![v], false, None)
    }

    pub fn scalar_leaf(v: R) -> Self {
        Self::new(vec![], vec![v], true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![R::zero(); numel_of(shape)], false, None)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        Self::new(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node<R>> {
        self.0.node.as_ref()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> R {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Same values, cut loose from any graph and not tracked.
    pub fn detach(&self) -> Self {
        if !self.0.requires_grad && self.0.node.is_none() {
            return self.clone();
        }
        Self::new(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Same values as a fresh gradient-tracked leaf.
    pub fn leaf_copy(&self) -> Self {
        Self::new(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    fn unary(&self, op: Op<R>, data: Vec<R>, shape: Vec<usize>) -> Self {
        let rg = self.0.requires_grad;
        let node = rg.then(|| Node {
            op,
            inputs: vec![self.clone()],
        });
        Self::new(shape, data, rg, node)
    }

    fn binary(&self, other: &Self, op: Op<R>, data: Vec<R>, shape: Vec<usize>) -> Self {
        let rg = self.0.requires_grad || other.0.requires_grad;
        let node = rg.then(|| Node {
            op,
            inputs: vec![self.clone(), other.clone()],
        });
        Self::new(shape, data, rg, node)
    }

    fn elementwise_binary(
        &self,
        other: &Self,
        op: Op<R>,
        f: impl Fn(R, R) -> R,
    ) -> Result<Self> {
        if self.shape() == other.shape() {
            let data = self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(self.binary(other, op, data, self.0.shape.clone()));
        }
        // Auto-broadcast through explicit broadcast_to nodes so the backward
        // reduction falls out of the broadcast_to rule.
        let target = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            Error::contract(format!(
                "{}: shapes {:?} and {:?} are not broadcast-compatible",
                op.name(),
                self.shape(),
                other.shape()
            ))
        })?;
        let a = self.broadcast_to(&target)?;
        let b = other.broadcast_to(&target)?;
        a.elementwise_binary(&b, op, f)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise_binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise_binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise_binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.elementwise_binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Self {
        let data = self.data().iter().map(|&v| -v).collect();
        self.unary(Op::Neg, data, self.0.shape.clone())
    }

    pub fn add_scalar(&self, c: R) -> Self {
        let data = self.data().iter().map(|&v| v + c).collect();
        self.unary(Op::AddScalar(c), data, self.0.shape.clone())
    }

    pub fn scale(&self, c: R) -> Self {
        let data = self.data().iter().map(|&v| v * c).collect();
        self.unary(Op::MulScalar(c), data, self.0.shape.clone())
    }

    pub fn tanh(&self) -> Self {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        self.unary(Op::Tanh, data, self.0.shape.clone())
    }

    pub fn exp(&self) -> Self {
        let data = self.data().iter().map(|v| v.exp()).collect();
        self.unary(Op::Exp, data, self.0.shape.clone())
    }

    pub fn ln(&self) -> Self {
        let data = self.data().iter().map(|v| v.ln()).collect();
        self.unary(Op::Ln, data, self.0.shape.clone())
    }

    pub fn sqrt(&self) -> Self {
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        self.unary(Op::Sqrt, data, self.0.shape.clone())
    }

    pub fn clamp_min(&self, c: R) -> Self {
        let data = self.data().iter().map(|&v| if v < c { c } else { v }).collect();
        self.unary(Op::ClampMin(c), data, self.0.shape.clone())
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::contract(format!(
                "matmul: incompatible shapes {a:?} and {b:?}"
            )));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![R::zero(); m * n];
        let lhs = self.data();
        let rhs = other.data();
        for i in 0..m {
            for p in 0..k {
                let l = lhs[i * k + p];
                let row = &rhs[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &r) in dst.iter_mut().zip(row) {
                    *d = *d + l * r;
                }
            }
        }
        Ok(self.binary(other, Op::Matmul, out, vec![m, n]))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Self> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "transpose: expected 2-D tensor, got shape {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.unary(Op::Transpose, out, vec![n, m]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(Error::contract(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(self.unary(Op::Reshape, self.0.data.clone(), shape.to_vec()))
    }

    /// Replicate along broadcast dimensions up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !broadcastable(self.shape(), shape) {
            return Err(Error::contract(format!(
                "broadcast_to: cannot broadcast {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let out_numel = numel_of(shape);
        let ndim = shape.len();
        let offset = ndim - self.shape().len();
        let mut padded = vec![1usize; ndim];
        padded[offset..].copy_from_slice(self.shape());
        // Strides into the (padded) source, 0 along broadcast dims.
        let mut strides = vec![0usize; ndim];
        let mut acc = 1usize;
        for d in (0..ndim).rev() {
            strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        let src = self.data();
        let mut out = Vec::with_capacity(out_numel);
        for flat in 0..out_numel {
            let mut rem = flat;
            let mut idx = 0usize;
            for d in (0..ndim).rev() {
                let c = rem % shape[d];
                rem /= shape[d];
                idx += c * strides[d];
            }
            out.push(src[idx]);
        }
        Ok(self.unary(Op::BroadcastTo, out, shape.to_vec()))
    }

    /// Sum down to a broadcast-compatible smaller shape (the adjoint of
    /// `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !broadcastable(shape, self.shape()) {
            return Err(Error::contract(format!(
                "sum_to: cannot reduce {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let ndim = self.shape().len();
        let offset = ndim - shape.len();
        let mut padded = vec![1usize; ndim];
        padded[offset..].copy_from_slice(shape);
        let mut tstrides = vec![0usize; ndim];
        let mut acc = 1usize;
        for d in (0..ndim).rev() {
            tstrides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        let src = self.data();
        let in_shape = self.shape().to_vec();
        let mut out = vec![R::zero(); numel_of(shape)];
        for (flat, &v) in src.iter().enumerate() {
            let mut rem = flat;
            let mut idx = 0usize;
            for d in (0..ndim).rev() {
                let c = rem % in_shape[d];
                rem /= in_shape[d];
                idx += if padded[d] == 1 { 0 } else { c * tstrides[d] };
            }
            out[idx] = out[idx] + v;
        }
        Ok(self.unary(Op::SumTo, out, shape.to_vec()))
    }

    /// Sum of all entries as a scalar tensor.
    pub fn sum(&self) -> Self {
        let s: R = self.data().iter().copied().sum();
        self.unary(Op::SumTo, vec![s], vec![])
    }

    /// Mean of all entries as a scalar tensor.
    pub fn mean(&self) -> Self {
        let n = R::from_f64_lossy(self.numel() as f64);
        self.sum().scale(R::one() / n)
    }

    /// Sum along one axis.
    pub fn sum_axis(&self, axis: usize, keepdims: bool) -> Result<Self> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::contract(format!(
                "sum_axis: axis {axis} out of range for shape {s:?}"
            )));
        }
        let mut target = s.to_vec();
        target[axis] = 1;
        let kept = self.sum_to(&target)?;
        if keepdims {
            Ok(kept)
        } else {
            let mut squeezed = s.to_vec();
            squeezed.remove(axis);
            kept.reshape(&squeezed)
        }
    }

    /// Mean along one axis.
    pub fn mean_axis(&self, axis: usize, keepdims: bool) -> Result<Self> {
        let n = R::from_f64_lossy(self.shape()[axis] as f64);
        Ok(self.sum_axis(axis, keepdims)?.scale(R::one() / n))
    }

    /// Row-major value accessor for 2-D tensors.
    pub fn at2(&self, i: usize, j: usize) -> R {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        self.0.data[i * s[1] + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn shape_and_data_length_must_agree() {
        assert!(T::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(T::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn constants_do_not_build_graph_nodes() {
        let a = T::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = T::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.is_leaf());
        assert_eq!(c.data(), &[4.0, 6.0]);
    }

    #[test]
    fn graph_nodes_track_tracked_inputs() {
        let a = T::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let b = T::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let c = a.mul(&b).unwrap();
        assert!(c.requires_grad());
        assert!(!c.is_leaf());
    }

    #[test]
    fn matmul_shapes() {
        let a = T::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = T::from_vec(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn broadcast_add_row_and_col() {
        let x = T::from_vec(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let row = T::from_vec(&[3], vec![10., 20., 30.]).unwrap();
        let col = T::from_vec(&[2, 1], vec![100., 200.]).unwrap();
        let y = x.add(&row).unwrap();
        assert_eq!(y.data(), &[10., 21., 32., 13., 24., 35.]);
        let z = x.add(&col).unwrap();
        assert_eq!(z.data(), &[100., 101., 102., 203., 204., 205.]);
    }

    #[test]
    fn sum_to_reduces_over_broadcast_dims() {
        let x = T::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = x.sum_to(&[3]).unwrap();
        assert_eq!(r.data(), &[5., 7., 9.]);
        let c = x.sum_to(&[2, 1]).unwrap();
        assert_eq!(c.data(), &[6., 15.]);
        assert_eq!(x.sum().item(), 21.0);
    }

    #[test]
    fn axis_reductions() {
        let x = T::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let m = x.mean_axis(1, false).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[2.0, 5.0]);
        let k = x.sum_axis(0, true).unwrap();
        assert_eq!(k.shape(), &[1, 3]);
    }

    #[test]
    fn incompatible_broadcast_is_a_contract_error() {
        let a = T::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let b = T::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "error should name the primitive: {msg}");
    }

    #[test]
    fn detach_cuts_tracking() {
        let a = T::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.tanh().detach();
        assert!(!b.requires_grad());
        assert!(b.is_leaf());
        assert_eq!(b.data(), a.data().iter().map(|v| v.tanh()).collect::<Vec<_>>().as_slice());
    }
}
