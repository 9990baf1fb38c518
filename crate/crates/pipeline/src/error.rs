use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Model(#[from] parauni_core::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

impl PipelineError {
    /// Process exit code: 2 config, 3 I/O and file formats, 4 invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Model(parauni_core::Error::Config(_)) => 2,
            Self::Io { .. } | Self::Data { .. } | Self::Format { .. } => 3,
            Self::Invariant(_) | Self::Model(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}
