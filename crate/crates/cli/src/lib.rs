//! Library side of the `hba-unet` command: run configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_gradcheck, cmd_predict, cmd_synth, cmd_train, AblationRow, EvaluateArgs, RunPaths,
    SynthArgs, TrainSummary,
};
pub use config::{RunConfig, SplitMode};
