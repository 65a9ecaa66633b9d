//! Write-once network execution: eager arrays or autodiff tape.
//!
//! Model code is generic over [`Backend`], so a single forward definition
//! serves training (gradient tape) and inference (plain arrays). Parameters
//! are addressed by index into a caller-owned slice; the graph backend
//! memoizes one tape leaf per parameter so repeated fetches share a node
//! and gradients accumulate correctly.

use ndarray::ArrayD;

use super::graph::{Graph, NodeId};
use super::{ops, Scalar};

/// Index of a parameter tensor in the owning store.
pub type ParamId = usize;

/// Uniform op surface for network code.
pub trait Backend<F: Scalar> {
    type T: Clone;

    fn param(&mut self, id: ParamId) -> Self::T;
    fn constant(&mut self, v: ArrayD<F>) -> Self::T;
    /// Concrete value of a tensor (clones; use sparingly).
    fn value(&self, t: &Self::T) -> ArrayD<F>;
    fn scalar(&self, t: &Self::T) -> F {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&mut self, a: &Self::T, c: f64) -> Self::T;
    fn add_scalar(&mut self, a: &Self::T, c: f64) -> Self::T;
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn transpose(&mut self, a: &Self::T) -> Self::T;
    fn reshape(&mut self, a: &Self::T, shape: &[usize]) -> Self::T;
    fn concat(&mut self, parts: &[Self::T], axis: usize) -> Self::T;
    fn slice_axis(&mut self, a: &Self::T, axis: usize, start: usize, len: usize) -> Self::T;
    fn conv2d(&mut self, x: &Self::T, w: &Self::T, b: Option<&Self::T>, stride: usize, pad: usize) -> Self::T;
    fn group_norm(&mut self, x: &Self::T, gamma: &Self::T, beta: &Self::T, groups: usize, eps: f64) -> Self::T;
    fn layer_norm(&mut self, x: &Self::T, gamma: &Self::T, beta: &Self::T, eps: f64) -> Self::T;
    fn silu(&mut self, a: &Self::T) -> Self::T;
    fn relu(&mut self, a: &Self::T) -> Self::T;
    fn softmax_rows(&mut self, a: &Self::T) -> Self::T;
    fn add_bias_chan(&mut self, x: &Self::T, b: &Self::T) -> Self::T;
    fn add_bias_row(&mut self, x: &Self::T, b: &Self::T) -> Self::T;
    fn upsample2x(&mut self, a: &Self::T) -> Self::T;
    fn downsum2x(&mut self, a: &Self::T) -> Self::T;
    fn sum_all(&mut self, a: &Self::T) -> Self::T;
    fn mean_all(&mut self, a: &Self::T) -> Self::T;

    fn linear(&mut self, x: &Self::T, w: &Self::T, b: &Self::T) -> Self::T {
        let y = self.matmul(x, w);
        self.add_bias_row(&y, b)
    }
}

/// Eager execution on owned arrays; no gradient bookkeeping.
pub struct PlainBackend<'a, F: Scalar> {
    params: &'a [ArrayD<F>],
}

impl<'a, F: Scalar> PlainBackend<'a, F> {
    pub fn new(params: &'a [ArrayD<F>]) -> Self {
        PlainBackend { params }
    }
}

macro_rules! as_dim {
    ($v:expr, $dim:ty) => {
        $v.view().into_dimensionality::<$dim>().unwrap()
    };
}

impl<'a, F: Scalar> Backend<F> for PlainBackend<'a, F> {
    type T = ArrayD<F>;

    fn param(&mut self, id: ParamId) -> ArrayD<F> {
        self.params[id].clone()
    }
    fn constant(&mut self, v: ArrayD<F>) -> ArrayD<F> {
        v
    }
    fn value(&self, t: &ArrayD<F>) -> ArrayD<F> {
        t.clone()
    }

    fn add(&mut self, a: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
        a + b
    }
    fn sub(&mut self, a: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
        a - b
    }
    fn mul(&mut self, a: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
        a * b
    }
    fn scale(&mut self, a: &ArrayD<F>, c: f64) -> ArrayD<F> {
        let fc = F::from_f64(c);
        a.mapv(|v| v * fc)
    }
    fn add_scalar(&mut self, a: &ArrayD<F>, c: f64) -> ArrayD<F> {
        let fc = F::from_f64(c);
        a.mapv(|v| v + fc)
    }
    fn matmul(&mut self, a: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
        as_dim!(a, ndarray::Ix2).dot(&as_dim!(b, ndarray::Ix2)).into_dyn()
    }
    fn transpose(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        // Standard layout matters: flat reshapes follow transposes in the
        // token paths.
        as_dim!(a, ndarray::Ix2).t().as_standard_layout().to_owned().into_dyn()
    }
    fn reshape(&mut self, a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
        a.clone().into_shape_with_order(ndarray::IxDyn(shape)).unwrap()
    }
    fn concat(&mut self, parts: &[ArrayD<F>], axis: usize) -> ArrayD<F> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(axis), &views).unwrap()
    }
    fn slice_axis(&mut self, a: &ArrayD<F>, axis: usize, start: usize, len: usize) -> ArrayD<F> {
        a.slice_axis(ndarray::Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned()
    }
    fn conv2d(&mut self, x: &ArrayD<F>, w: &ArrayD<F>, b: Option<&ArrayD<F>>, stride: usize, pad: usize) -> ArrayD<F> {
        let xb = as_dim!(x, ndarray::Ix3);
        let wb = as_dim!(w, ndarray::Ix4);
        let bb = b.map(|v| as_dim!(v, ndarray::Ix1));
        ops::conv2d(&xb, &wb, bb.as_ref(), stride, pad).into_dyn()
    }
    fn group_norm(&mut self, x: &ArrayD<F>, gamma: &ArrayD<F>, beta: &ArrayD<F>, groups: usize, eps: f64) -> ArrayD<F> {
        ops::group_norm(
            &as_dim!(x, ndarray::Ix3),
            &as_dim!(gamma, ndarray::Ix1),
            &as_dim!(beta, ndarray::Ix1),
            groups,
            eps,
        )
        .0
        .into_dyn()
    }
    fn layer_norm(&mut self, x: &ArrayD<F>, gamma: &ArrayD<F>, beta: &ArrayD<F>, eps: f64) -> ArrayD<F> {
        ops::layer_norm(
            &as_dim!(x, ndarray::Ix2),
            &as_dim!(gamma, ndarray::Ix1),
            &as_dim!(beta, ndarray::Ix1),
            eps,
        )
        .0
        .into_dyn()
    }
    fn silu(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        a.mapv(ops::silu)
    }
    fn relu(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        a.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }
    fn softmax_rows(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        ops::softmax_rows(&as_dim!(a, ndarray::Ix2)).into_dyn()
    }
    fn add_bias_chan(&mut self, x: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
        let xv = as_dim!(x, ndarray::Ix3);
        let bv = as_dim!(b, ndarray::Ix1);
        let mut y = xv.to_owned();
        for (mut plane, &bias) in y.outer_iter_mut().zip(bv.iter()) {
            plane.mapv_inplace(|v| v + bias);
        }
        y.into_dyn()
    }
    fn add_bias_row(&mut self, x: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
        (&as_dim!(x, ndarray::Ix2) + &as_dim!(b, ndarray::Ix1)).into_dyn()
    }
    fn upsample2x(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        ops::upsample2x(&as_dim!(a, ndarray::Ix3)).into_dyn()
    }
    fn downsum2x(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        ops::downsum2x(&as_dim!(a, ndarray::Ix3)).into_dyn()
    }
    fn sum_all(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        ArrayD::from_elem(ndarray::IxDyn(&[]), a.sum())
    }
    fn mean_all(&mut self, a: &ArrayD<F>) -> ArrayD<F> {
        ArrayD::from_elem(ndarray::IxDyn(&[]), a.sum() / F::from_f64(a.len() as f64))
    }
}

/// Tape-recording execution for training and gradient checks.
pub struct GraphBackend<'a, F: Scalar> {
    pub graph: Graph<F>,
    params: &'a [ArrayD<F>],
    bound: Vec<Option<NodeId>>,
}

impl<'a, F: Scalar> GraphBackend<'a, F> {
    pub fn new(params: &'a [ArrayD<F>]) -> Self {
        GraphBackend {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// The tape leaf bound to parameter `id`, if the forward pass used it.
    pub fn bound_node(&self, id: ParamId) -> Option<NodeId> {
        self.bound[id]
    }

    /// Runs backward from `root` and collects per-parameter gradients
    /// (zeros for parameters the graph never touched).
    pub fn grads(&self, root: NodeId) -> Vec<ArrayD<F>> {
        let all = self.graph.backward(root);
        self.bound
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Some(node) => all[node.idx()]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(self.params[i].raw_dim())),
                None => ArrayD::zeros(self.params[i].raw_dim()),
            })
            .collect()
    }
}

impl<'a, F: Scalar> Backend<F> for GraphBackend<'a, F> {
    type T = NodeId;

    fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id] {
            return n;
        }
        let n = self.graph.var(self.params[id].clone());
        self.bound[id] = Some(n);
        n
    }
    fn constant(&mut self, v: ArrayD<F>) -> NodeId {
        self.graph.constant(v)
    }
    fn value(&self, t: &NodeId) -> ArrayD<F> {
        self.graph.value(*t).clone()
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.graph.add(*a, *b)
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.graph.sub(*a, *b)
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.graph.mul(*a, *b)
    }
    fn scale(&mut self, a: &NodeId, c: f64) -> NodeId {
        self.graph.scale(*a, c)
    }
    fn add_scalar(&mut self, a: &NodeId, c: f64) -> NodeId {
        self.graph.add_scalar(*a, c)
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.graph.matmul(*a, *b)
    }
    fn transpose(&mut self, a: &NodeId) -> NodeId {
        self.graph.transpose(*a)
    }
    fn reshape(&mut self, a: &NodeId, shape: &[usize]) -> NodeId {
        self.graph.reshape(*a, shape)
    }
    fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.graph.concat(parts, axis)
    }
    fn slice_axis(&mut self, a: &NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.graph.slice_axis(*a, axis, start, len)
    }
    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>, stride: usize, pad: usize) -> NodeId {
        self.graph.conv2d(*x, *w, b.copied(), stride, pad)
    }
    fn group_norm(&mut self, x: &NodeId, gamma: &NodeId, beta: &NodeId, groups: usize, eps: f64) -> NodeId {
        self.graph.group_norm(*x, *gamma, *beta, groups, eps)
    }
    fn layer_norm(&mut self, x: &NodeId, gamma: &NodeId, beta: &NodeId, eps: f64) -> NodeId {
        self.graph.layer_norm(*x, *gamma, *beta, eps)
    }
    fn silu(&mut self, a: &NodeId) -> NodeId {
        self.graph.silu(*a)
    }
    fn relu(&mut self, a: &NodeId) -> NodeId {
        self.graph.relu(*a)
    }
    fn softmax_rows(&mut self, a: &NodeId) -> NodeId {
        self.graph.softmax_rows(*a)
    }
    fn add_bias_chan(&mut self, x: &NodeId, b: &NodeId) -> NodeId {
        self.graph.add_bias_chan(*x, *b)
    }
    fn add_bias_row(&mut self, x: &NodeId, b: &NodeId) -> NodeId {
        self.graph.add_bias_row(*x, *b)
    }
    fn upsample2x(&mut self, a: &NodeId) -> NodeId {
        self.graph.upsample2x(*a)
    }
    fn downsum2x(&mut self, a: &NodeId) -> NodeId {
        self.graph.downsum2x(*a)
    }
    fn sum_all(&mut self, a: &NodeId) -> NodeId {
        self.graph.sum_all(*a)
    }
    fn mean_all(&mut self, a: &NodeId) -> NodeId {
        self.graph.mean_all(*a)
    }
}

/// Adapter that runs one network's forward inside another network's
/// backend while sourcing parameters from a separate frozen store. Every op
/// delegates to the inner backend; `param(id)` resolves against the frozen
/// arrays and enters the computation as a constant, so no gradients flow
/// into (or out of) the frozen network. Resolved constants are memoized per
/// id.
pub struct FrozenParams<'a, 'b, F: Scalar, B: Backend<F>> {
    inner: &'a mut B,
    frozen: &'b [ArrayD<F>],
    resolved: Vec<Option<B::T>>,
}

impl<'a, 'b, F: Scalar, B: Backend<F>> FrozenParams<'a, 'b, F, B> {
    pub fn new(inner: &'a mut B, frozen: &'b [ArrayD<F>]) -> Self {
        let resolved = vec![None; frozen.len()];
        FrozenParams { inner, frozen, resolved }
    }
}

impl<'a, 'b, F: Scalar, B: Backend<F>> Backend<F> for FrozenParams<'a, 'b, F, B> {
    type T = B::T;

    fn param(&mut self, id: ParamId) -> B::T {
        if let Some(t) = &self.resolved[id] {
            return t.clone();
        }
        let t = self.inner.constant(self.frozen[id].clone());
        self.resolved[id] = Some(t.clone());
        t
    }
    fn constant(&mut self, v: ArrayD<F>) -> B::T {
        self.inner.constant(v)
    }
    fn value(&self, t: &B::T) -> ArrayD<F> {
        self.inner.value(t)
    }

    fn add(&mut self, a: &B::T, b: &B::T) -> B::T {
        self.inner.add(a, b)
    }
    fn sub(&mut self, a: &B::T, b: &B::T) -> B::T {
        self.inner.sub(a, b)
    }
    fn mul(&mut self, a: &B::T, b: &B::T) -> B::T {
        self.inner.mul(a, b)
    }
    fn scale(&mut self, a: &B::T, c: f64) -> B::T {
        self.inner.scale(a, c)
    }
    fn add_scalar(&mut self, a: &B::T, c: f64) -> B::T {
        self.inner.add_scalar(a, c)
    }
    fn matmul(&mut self, a: &B::T, b: &B::T) -> B::T {
        self.inner.matmul(a, b)
    }
    fn transpose(&mut self, a: &B::T) -> B::T {
        self.inner.transpose(a)
    }
    fn reshape(&mut self, a: &B::T, shape: &[usize]) -> B::T {
        self.inner.reshape(a, shape)
    }
    fn concat(&mut self, parts: &[B::T], axis: usize) -> B::T {
        self.inner.concat(parts, axis)
    }
    fn slice_axis(&mut self, a: &B::T, axis: usize, start: usize, len: usize) -> B::T {
        self.inner.slice_axis(a, axis, start, len)
    }
    fn conv2d(&mut self, x: &B::T, w: &B::T, b: Option<&B::T>, stride: usize, pad: usize) -> B::T {
        self.inner.conv2d(x, w, b, stride, pad)
    }
    fn group_norm(&mut self, x: &B::T, gamma: &B::T, beta: &B::T, groups: usize, eps: f64) -> B::T {
        self.inner.group_norm(x, gamma, beta, groups, eps)
    }
    fn layer_norm(&mut self, x: &B::T, gamma: &B::T, beta: &B::T, eps: f64) -> B::T {
        self.inner.layer_norm(x, gamma, beta, eps)
    }
    fn silu(&mut self, a: &B::T) -> B::T {
        self.inner.silu(a)
    }
    fn relu(&mut self, a: &B::T) -> B::T {
        self.inner.relu(a)
    }
    fn softmax_rows(&mut self, a: &B::T) -> B::T {
        self.inner.softmax_rows(a)
    }
    fn add_bias_chan(&mut self, x: &B::T, b: &B::T) -> B::T {
        self.inner.add_bias_chan(x, b)
    }
    fn add_bias_row(&mut self, x: &B::T, b: &B::T) -> B::T {
        self.inner.add_bias_row(x, b)
    }
    fn upsample2x(&mut self, a: &B::T) -> B::T {
        self.inner.upsample2x(a)
    }
    fn downsum2x(&mut self, a: &B::T) -> B::T {
        self.inner.downsum2x(a)
    }
    fn sum_all(&mut self, a: &B::T) -> B::T {
        self.inner.sum_all(a)
    }
    fn mean_all(&mut self, a: &B::T) -> B::T {
        self.inner.mean_all(a)
    }
}
