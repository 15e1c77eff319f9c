//! Experiment harness for the deki toolkit: configs, problem instances,
//! runs and repeats, metrics, audits and output files.

pub mod audit;
pub mod config;
pub mod experiment;
pub mod lowerbound;
pub mod metrics;
pub mod output;
pub mod problem;

pub use config::{ExperimentConfig, ProblemKind, SchemeKind};
pub use experiment::{repeat, run, run_on, Aggregate, Trial};
