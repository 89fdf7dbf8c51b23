//! Experiment plumbing: config files, seeded multi-repeat runs, CSV output
//! and run comparison.

mod compare;
mod config;
mod csvio;
mod run;
mod svg;

pub use compare::{compare, Comparison, ComparisonRow};
pub use config::{EvalSection, ExperimentConfig, PolicySection, SuiteSection, TrainOverrides, TrainSection};
pub use csvio::{eval_rows, metrics_rows, EVAL_COLUMNS, EVAL_SCHEMA, METRICS_COLUMNS, METRICS_SCHEMA};
pub use run::{run_experiment, run_single, training_schedule, RunArtifacts, RunResult, Summary, SummaryRow};
