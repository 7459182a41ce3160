//! Library side of the `spd-agg` command: dataset and checkpoint formats, the
//! synthetic generator, and one function per subcommand.

pub mod checkpoint;
pub mod commands;
pub mod fts;
pub mod synth;

use thiserror::Error;

pub use commands::{cmd_certify, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, RunConfig};
pub use fts::{fts_read, fts_write, FormatError, FtsDataset};
pub use synth::synth_generate;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(#[from] FormatError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] spdagg::Error),

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
