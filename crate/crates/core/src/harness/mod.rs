//! Reproducible workflow around the model: run configs, checkpoints, traces
//! and the command implementations behind the `cag` binary.

mod checkpoint;
mod commands;
mod config;
mod trace;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use commands::{cmd_eval, cmd_gen, cmd_train, cmd_trace, find_dialog, TrainOutcome, CHECKPOINT_FILE, LOG_FILE};
pub use config::RunConfig;
pub use trace::{trace_example, ObjectStep, StepTrace, TraceFile, SIMPLEX_TOL, TOP_OBJECTS};
