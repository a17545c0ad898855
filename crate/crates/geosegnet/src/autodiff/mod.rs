//! Reverse-mode automatic differentiation on a dynamic graph.
//!
//! A [`Graph`] is rebuilt for every forward pass: each op call evaluates
//! eagerly, appends a node recording its inputs, and returns a [`Value`]
//! handle.  [`Graph::backward`] then walks the tape in reverse, adding
//! into per-node gradient buffers (nothing is cleared implicitly; call
//! [`Graph::zero_grads`] between passes).  Graphs are single-threaded;
//! run one per worker and merge parameter gradients outside.
//!
//! Long-lived state (named parameter tensors, optimizer moments,
//! normalization running averages) lives in a [`ParamStore`], bound into
//! a graph by name at forward time and written by [`Adam`] steps.

mod checkpoint;
mod graph;
mod layers;
mod optim;
mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, Value};
pub use layers::{apply_stat_updates, Dense, Mode, RBlock, StatUpdate, LEAKY_SLOPE};
pub use optim::Adam;
pub use store::{ParamStore, Tensor};
