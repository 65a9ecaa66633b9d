//! Reverse-mode autodiff on a flat tape.
//!
//! Operations append nodes to a [`Graph`]; node indices are handed back as
//! [`NodeId`]s, so parents always precede children and reverse insertion
//! order is a valid reverse topological order for backpropagation. Values
//! are computed eagerly, which keeps the tape trivially correct (no lazy
//! re-evaluation) and lets callers inspect intermediate tensors.
//!
//! The op set is exactly what the networks in this crate need; every
//! backward formula is exercised against central finite differences in the
//! tests below.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::ops;
use super::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(u32);

impl NodeId {
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { src: NodeId, axis: usize, start: usize, len: usize },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64 },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Silu(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    AddBiasChan(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    Upsample2x(NodeId),
    Downsum2x(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    needs_grad: bool,
    op: Op,
}

/// Autodiff tape. Build values through the methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, needs_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, needs_grad, op });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    /// Constant leaf: gradients never flow into it.
    pub fn constant(&mut self, v: ArrayD<F>) -> NodeId {
        self.push(v, false, Op::Leaf)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn var(&mut self, v: ArrayD<F>) -> NodeId {
        self.push(v, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.idx()].value
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            va + vb
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
            va - vb
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
            va * vb
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let fc = F::from_f64(c);
        let v = self.value(a).mapv(|x| x * fc);
        let g = self.ng(a);
        self.push(v, g, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let fc = F::from_f64(c);
        let v = self.value(a).mapv(|x| x + fc);
        let g = self.ng(a);
        self.push(v, g, Op::AddScalar(a))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let va = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let vb = self.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            assert_eq!(va.dim().1, vb.dim().0, "matmul inner dimension mismatch");
            va.dot(&vb).into_dyn()
        };
        let g = self.ng(a) || self.ng(b);
        self.push(v, g, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = {
            let va = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            // Materialize standard layout: `.t().to_owned()` would keep
            // reversed strides, breaking later flat reshapes.
            va.t().as_standard_layout().to_owned().into_dyn()
        };
        let g = self.ng(a);
        self.push(v, g, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let g = self.ng(a);
        self.push(v, g, Op::Reshape(a))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(v, g, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice_axis(&mut self, src: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self
            .value(src)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let g = self.ng(src);
        self.push(v, g, Op::Slice { src, axis, start, len })
    }

    /// Convolution over (Cin, H, W) with weights (Cout, Cin, kh, kw).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = {
            let vx = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let vw = self.value(w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let vb = b.map(|bb| {
                self.value(bb)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
            });
            ops::conv2d(&vx, &vw, vb.as_ref(), stride, pad).into_dyn()
        };
        let g = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        self.push(v, g, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> NodeId {
        let v = {
            let vx = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let vg = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let vb = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            ops::group_norm(&vx, &vg, &vb, groups, eps).0.into_dyn()
        };
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, g, Op::GroupNorm { x, gamma, beta, groups, eps })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = {
            let vx = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let vg = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let vb = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            ops::layer_norm(&vx, &vg, &vb, eps).0.into_dyn()
        };
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, g, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(ops::silu);
        let g = self.ng(a);
        self.push(v, g, Op::Silu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        let g = self.ng(a);
        self.push(v, g, Op::Relu(a))
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = {
            let va = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            ops::softmax_rows(&va).into_dyn()
        };
        let g = self.ng(a);
        self.push(v, g, Op::SoftmaxRows(a))
    }

    /// (C, H, W) + per-channel bias (C).
    pub fn add_bias_chan(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let v = {
            let vx = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let vb = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            assert_eq!(vx.dim().0, vb.dim(), "channel bias length mismatch");
            let mut y = vx.to_owned();
            for (mut plane, &bias) in y.outer_iter_mut().zip(vb.iter()) {
                plane.mapv_inplace(|v| v + bias);
            }
            y.into_dyn()
        };
        let g = self.ng(x) || self.ng(b);
        self.push(v, g, Op::AddBiasChan(x, b))
    }

    /// (N, d) + per-column bias (d).
    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let v = {
            let vx = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let vb = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            assert_eq!(vx.dim().1, vb.dim(), "row bias length mismatch");
            (&vx + &vb).into_dyn()
        };
        let g = self.ng(x) || self.ng(b);
        self.push(v, g, Op::AddBiasRow(x, b))
    }

    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let v = {
            let va = self.value(a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
            ops::upsample2x(&va).into_dyn()
        };
        let g = self.ng(a);
        self.push(v, g, Op::Upsample2x(a))
    }

    pub fn downsum2x(&mut self, a: NodeId) -> NodeId {
        let v = {
            let va = self.value(a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
            ops::downsum2x(&va).into_dyn()
        };
        let g = self.ng(a);
        self.push(v, g, Op::Downsum2x(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let g = self.ng(a);
        self.push(v, g, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        assert!(n > 0, "mean of empty tensor");
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / F::from_f64(n as f64));
        let g = self.ng(a);
        self.push(v, g, Op::MeanAll(a))
    }

    /// Convenience: `x @ w + b` for tokens (N, din), weights (din, dout).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias_row(y, b)
    }

    /// Backpropagates from the scalar node `root`. Returns one gradient
    /// slot per node; only nodes with `needs_grad` receive gradients.
    pub fn backward(&self, root: NodeId) -> Vec<Option<ArrayD<F>>> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        assert!(self.ng(root), "backward root does not depend on any variable");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.idx()] = Some(ArrayD::from_elem(self.value(root).raw_dim(), F::one()));

        for idx in (0..=root.idx()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            // Leaves keep their gradient for the caller; interior nodes
            // release theirs once propagated.
            let g = if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            } else {
                grads[idx].take().unwrap()
            };
            self.backprop_node(idx, &g, &mut grads);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<F>>], id: NodeId, delta: ArrayD<F>) {
        if !self.ng(id) {
            return;
        }
        // Normalize layout so every stored gradient supports flat slicing
        // (transposed views keep reversed strides through `to_owned`).
        let delta = if delta.is_standard_layout() {
            delta
        } else {
            delta.as_standard_layout().to_owned()
        };
        match &mut grads[id.idx()] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match self.nodes[idx].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g * self.value(b));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g * self.value(a));
                }
            }
            Op::Scale(a, c) => {
                let fc = F::from_f64(c);
                self.accumulate(grads, a, g.mapv(|v| v * fc));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, a, g.clone());
            }
            Op::Matmul(a, b) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.ng(a) {
                    let vb = self.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    self.accumulate(grads, a, gv.dot(&vb.t()).into_dyn());
                }
                if self.ng(b) {
                    let va = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    self.accumulate(grads, b, va.t().dot(&gv).into_dyn());
                }
            }
            Op::Transpose(a) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                self.accumulate(grads, a, gv.t().to_owned().into_dyn());
            }
            Op::Reshape(a) => {
                let shape = self.value(a).raw_dim();
                self.accumulate(grads, a, g.clone().into_shape_with_order(shape).unwrap());
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).shape()[axis];
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                        .to_owned();
                    self.accumulate(grads, p, piece);
                    offset += len;
                }
            }
            Op::Slice { src, axis, start, len } => {
                let mut dx = ArrayD::<F>::zeros(self.value(src).raw_dim());
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                self.accumulate(grads, src, dx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let vw = self.value(w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let vx = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                if self.ng(x) {
                    let dx = ops::conv2d_grad_input(&gv, &vw, vx.dim(), stride, pad);
                    self.accumulate(grads, x, dx.into_dyn());
                }
                if self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false) {
                    let (kh, kw) = (vw.dim().2, vw.dim().3);
                    let (dw, db) = ops::conv2d_grad_weights(&vx, &gv, kh, kw, stride, pad);
                    if self.ng(w) {
                        self.accumulate(grads, w, dw.into_dyn());
                    }
                    if let Some(bb) = b {
                        self.accumulate(grads, bb, db.into_dyn());
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let vx = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let vg = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let vb = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                // Recompute the cheap statistics rather than storing them.
                let (_, stats) = ops::group_norm(&vx, &vg, &vb, groups, eps);
                let (dx, dgamma, dbeta) = ops::group_norm_grad(&vx, &gv, &vg, &stats, groups);
                self.accumulate(grads, x, dx.into_dyn());
                self.accumulate(grads, gamma, dgamma.into_dyn());
                self.accumulate(grads, beta, dbeta.into_dyn());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let vg = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let vb = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (_, stats) = ops::layer_norm(&vx, &vg, &vb, eps);
                let (dx, dgamma, dbeta) = ops::layer_norm_grad(&vx, &gv, &vg, &stats);
                self.accumulate(grads, x, dx.into_dyn());
                self.accumulate(grads, gamma, dgamma.into_dyn());
                self.accumulate(grads, beta, dbeta.into_dyn());
            }
            Op::Silu(a) => {
                let dx = ndarray::Zip::from(g)
                    .and(self.value(a))
                    .map_collect(|&go, &xi| go * ops::silu_grad(xi));
                self.accumulate(grads, a, dx);
            }
            Op::Relu(a) => {
                let dx = ndarray::Zip::from(g)
                    .and(self.value(a))
                    .map_collect(|&go, &xi| if xi > F::zero() { go } else { F::zero() });
                self.accumulate(grads, a, dx);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(NodeId(idx as u32)).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let dx = ops::softmax_rows_grad(&y, &gv);
                self.accumulate(grads, a, dx.into_dyn());
            }
            Op::AddBiasChan(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.ng(b) {
                    let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let db = gv.sum_axis(Axis(2)).sum_axis(Axis(1));
                    self.accumulate(grads, b, db.into_dyn());
                }
            }
            Op::AddBiasRow(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.ng(b) {
                    let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    self.accumulate(grads, b, gv.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Upsample2x(a) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                self.accumulate(grads, a, ops::downsum2x(&gv).into_dyn());
            }
            Op::Downsum2x(a) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                self.accumulate(grads, a, ops::upsample2x(&gv).into_dyn());
            }
            Op::SumAll(a) => {
                let go = *g.iter().next().unwrap();
                let dx = ArrayD::from_elem(self.value(a).raw_dim(), go);
                self.accumulate(grads, a, dx);
            }
            Op::MeanAll(a) => {
                let n = F::from_f64(self.value(a).len() as f64);
                let go = *g.iter().next().unwrap() / n;
                let dx = ArrayD::from_elem(self.value(a).raw_dim(), go);
                self.accumulate(grads, a, dx);
            }
        }
    }
}
