//! Graphmill: a single-machine, multi-threaded graph learning pipeline.
//!
//! The crate is organized around three stages that share one data contract,
//! the [`graph::GraphFeature`] record (a target node together with its k-hop
//! neighborhood, stored in canonical text form):
//!
//! * [`flat`] turns a node table and an edge table into one self-contained
//!   GraphFeature per target node, running a Map stage and k Reduce rounds
//!   on the local MapReduce executor in [`engine`].
//! * [`train`] consumes `(target, label, GraphFeature)` triples and fits a
//!   GCN, GraphSAGE, or GAT model (layers in [`nn`]) with data-parallel
//!   workers around a shared parameter store.
//! * [`infer`] scores every node of a graph by slicing a trained model into
//!   per-layer pieces and propagating embeddings through k+1 Reduce rounds,
//!   so each node's embedding at each layer is computed exactly once.
//!
//! All randomness is seeded, all parallel reductions have fixed evaluation
//! order, and all on-disk formats are canonical text, so every stage is
//! reproducible byte-for-byte across runs and worker counts.

pub mod data;
pub mod engine;
pub mod flat;
pub mod graph;
pub mod infer;
pub mod nn;
pub mod train;

pub use graph::{EdgeRecord, Graph, GraphError, GraphFeature, NodeId, NodeRecord};
