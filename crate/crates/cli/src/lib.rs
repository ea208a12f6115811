//! Experiment plumbing around the core library: declarative TOML configs,
//! a resumable stage runner, prebuilt table matrices and table rendering.

pub mod config;
pub mod data;
pub mod presets;
pub mod report;
pub mod runner;

use detlab_core::error::Error;

/// Exit code for a failed command: configuration problems are 2, everything
/// else (I/O, data, training) is 1.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        _ => 1,
    }
}
