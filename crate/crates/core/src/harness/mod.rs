//! Metrics, checkpoints, run configuration and experiment orchestration.

pub mod checkpoint;
pub mod kv;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod run;
pub mod toy;
