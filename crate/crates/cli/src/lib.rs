//! Experiment orchestration for the `rgwm` command line tool.

pub mod config;
pub mod evaluate;
pub mod manifest;
pub mod pipeline;
pub mod prefix_tuner;
pub mod train;

use thiserror::Error;

pub use config::Config;
pub use pipeline::Pipeline;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] rgwm_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code: 2 for bad configuration or arguments, 3 for I/O
    /// and unreadable inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use rgwm_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::InvalidArgument(_)) => 2,
            CliError::Io(_) | CliError::Core(E::Io(_) | E::Format(_) | E::Json(_)) => 3,
            CliError::Core(E::Internal(_)) => 1,
        }
    }
}
