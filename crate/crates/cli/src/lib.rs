//! Command-line front end: experiment configs and the pipeline subcommands.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_embed, cmd_predict, cmd_report, cmd_run, cmd_select, Manifest, RunOutcome, Stage,
    StageError,
};
pub use config::{ExperimentConfig, Overrides};
