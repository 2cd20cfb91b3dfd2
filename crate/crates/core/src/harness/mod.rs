//! Experiment harness: configuration, runs, ablation grids, metrics and figures.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod plots;
pub mod suite;

pub use config::{Ablation, ExperimentConfig, Overrides, Partition, Seeds, OUT_ROOT_ENV};
pub use experiment::{run_experiment, ExperimentOutcome, RunManifest};
pub use metrics::{read_metrics, MetricsRecord};
pub use plots::emit_plots;
pub use suite::{run_ablation_suite, run_suite, SuiteSummary};
