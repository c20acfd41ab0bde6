//! Configuration-driven orchestration of the full pipeline: world, pool,
//! retrieval, training, evaluation, sweeps and reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{Layout, Workspace};
