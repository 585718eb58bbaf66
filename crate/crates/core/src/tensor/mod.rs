//! Minimal reverse-mode autodiff over dense `f64` matrices.
//!
//! Every model in the crate runs one [`Graph`] per sequence. Batches are
//! assembled by summing per-sequence [`Gradients`] in a fixed order, so results
//! do not depend on how many worker threads ran the forward passes.

mod graph;
pub mod nn;
mod optim;
mod params;

pub use graph::{AttentionSpec, BucketGrid, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamId, ParamStore, StoreTag};

pub type Mat = ndarray::Array2<f64>;
