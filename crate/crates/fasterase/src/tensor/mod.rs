//! Numeric foundation: shared kernels and a small reverse-mode autodiff.
//!
//! The same kernel functions ([`ops`]) back both execution modes, so the
//! differentiable graph and the plain inference path compute identical
//! values. Networks are written once against the [`backend::Backend`]
//! trait; [`backend::PlainBackend`] runs them eagerly on arrays and
//! [`backend::GraphBackend`] records them on a [`graph::Graph`] tape for
//! backpropagation.
//!
//! Everything is generic over [`Scalar`]: `f32` for training speed, `f64`
//! for finite-difference verification of the analytic gradients.

pub mod backend;
pub mod graph;
pub mod ops;

pub use backend::{Backend, FrozenParams, GraphBackend, PlainBackend};
pub use graph::{Graph, NodeId};

/// Floating-point element type for all tensor work.
pub trait Scalar: ndarray::NdFloat + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
