//! Library side of the `amoe-lab` binary: run configuration and the
//! subcommands, callable without spawning a process.

pub mod commands;
pub mod config;

pub use commands::{
    ablate, eval, gen_data, inspect_adapters, load_data, sweep, train, Dataset, Inspection, Prediction, SweepCell,
    VariantRun, SWEEP_GRID,
};
pub use config::{RunConfig, TrainSettings, CONFIG_FILE};
