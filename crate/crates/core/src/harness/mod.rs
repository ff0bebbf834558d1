//! Experiment orchestration: configs, sweeps over a bounded worker pool,
//! immutable run records and reports.

pub mod config;
pub mod pool;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Method, Scenario};
pub use report::{emit_report, ReportSummary};
pub use run::{execute, Existing, ExperimentRun};
