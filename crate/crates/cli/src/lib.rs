//! Subcommands of the `bgnn` binary as library functions.

pub mod bench;
pub mod commands;
pub mod manifest;

pub use commands::{
    cmd_bench, cmd_convert, cmd_distill, cmd_infer, cmd_synth, cmd_train, load_config, load_data, read_model,
    with_threads, DistillOutcome, InferOutcome, Options, SplitArg, TrainOutcome,
};
