//! Experiment runner: config loading, execution and CSV output.

pub mod config;
pub mod plotdata;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind, NetworkSpec};
pub use plotdata::emit_plotdata;
pub use runner::{run_experiment, Manifest};

/// Process exit code for an error: 2 for bad input, 3 for failed runs.
pub fn exit_code(e: &crate::Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        3
    }
}
