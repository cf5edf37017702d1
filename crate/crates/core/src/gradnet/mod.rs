//! Small differentiable-layer engine.
//!
//! Tensors are dense, row-major and batch-leading; feature maps use
//! `(batch, height, width, channels)` layout. Every [`Layer`] implements its
//! own forward and backward kernel, and a [`Graph`] composes layers over an
//! explicit DAG in construction (topological) order.

mod attention;
mod basic;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
mod layer;
mod norm;
mod pool;
mod real;
mod tensor;

pub use attention::{AttentionAxis, SelfAttention};
pub use basic::{Add, Concat, Dense, Dropout, Flatten, Relu, Reshape};
pub use conv::{Conv2d, Padding};
pub use graph::{Graph, GraphBuilder, NodeId};
pub use layer::{Layer, LayerKind};
pub use norm::BatchNorm;
pub use pool::MaxPool2d;
pub use real::{gemm, MatRef, Real};
pub use tensor::Tensor;

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
