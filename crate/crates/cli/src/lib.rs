//! Library side of the `semalign` command: configuration, the five
//! subcommands and the self-check battery. `main.rs` only parses arguments.

pub mod commands;
pub mod config;
pub mod selfcheck;

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_sample_analysis, cmd_train, EvalArgs, Overrides, ReportFormat,
    TrainSummary,
};
pub use config::RunConfig;
