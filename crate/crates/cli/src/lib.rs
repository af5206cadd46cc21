//! Experiment harness around the `metacount` library: configuration, the
//! generate → pretrain → metatrain/reptile → evaluate pipeline, and report files.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

pub use config::{ExperimentConfig, Overrides};
pub use pipeline::Method;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; nothing has been written.
    #[error("{0}")]
    Usage(String),
    /// A required upstream artifact (dataset, checkpoint) is absent.
    #[error("{0}")]
    Missing(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Runtime(#[from] metacount::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}
