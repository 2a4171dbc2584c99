//! Numerical core: sparse aggregation with edge partitioning, GNN layers
//! (GCN, GraphSAGE with an add combiner, multi-head GAT), batch
//! vectorization with per-layer pruning, manual reverse-mode gradients,
//! and Adam.
//!
//! Parameters and activations are 32-bit by default; every aggregation
//! reduction accumulates in 64-bit with a fixed per-row evaluation order,
//! which makes results bitwise independent of the partition count. All
//! kernels are generic over the scalar so gradient checks can run the
//! exact same code in f64.

mod adam;
mod batch;
mod layers;
mod loss;
mod model;
mod sparse;

pub use adam::{adam_step, AdamState};
pub use batch::{prune_adj, vectorize, BatchLabels, VectorizedBatch};
pub use layers::{DropoutSpec, LayerKind, LayerParams};
pub use loss::{sigmoid_ce, softmax_ce, TaskKind};
pub use model::{
    backward, forward, ForwardCache, ForwardOpts, Model, ModelGrads, ModelSpec,
};
pub use sparse::{
    aggregate, aggregate_backward, partition_edges, AdjEntry, AggCoeffs, EdgePartition,
    SparseAdj,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("stale forward cache: {0}")]
    CacheError(String),
    #[error("numerics error: {0}")]
    NumericsError(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Scalar abstraction over f32/f64 so the same kernels serve training and
/// high-precision gradient checking.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    /// Named to dodge `ToPrimitive::to_f64`, which shadows a plain
    /// `to_f64` on `&T` receivers.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn from_f32(x: f32) -> f32 {
        x
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn from_f32(x: f32) -> f64 {
        x as f64
    }
    fn as_f64(self) -> f64 {
        self
    }
}
