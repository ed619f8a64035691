//! Experiment scaffolding: hidden systems, configs, run logs and audits.

pub mod config;
pub mod expr;
mod log;
pub mod run;
pub mod system;

pub use config::{ConfigError, Experiment, ExperimentConfig, Mode};
pub use log::{Outcome, QueryChoice, RunLog, Snapshot, StepRecord};
pub use run::{audit, cost_bounds, fit_report, run, AuditReport, CostBounds, FitReport, RunFailure};
pub use system::TrueSystem;
