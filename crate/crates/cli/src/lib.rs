//! Pipeline runner for the `ltvrank` stages: `gen`, `labels`, `train`,
//! `eval`, `replay` and `report`, driven by one `key = value` config file.

pub mod app;
pub mod config;
pub mod pipeline;
pub mod store;

pub use config::{PipelineConfig, Stage};
pub use pipeline::{run_all, run_stage, CliError, StageOutcome};
