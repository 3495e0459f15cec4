//! Experiment driver: configuration, dataset generation, pretraining,
//! fine-tuning grids, closed-loop evaluation, probes and reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod rollout;

pub use config::{Cell, ExperimentConfig};
pub use pipeline::{Experiment, MissingArtifact};
pub use report::ReportTable;
