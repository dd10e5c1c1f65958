use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: malformed PNM header: {reason}")]
    PnmHeader { path: PathBuf, reason: String },

    #[error("{path}: truncated PNM payload (expected {expected} bytes, found {found})")]
    PnmTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: unsupported PNM maxval {maxval} (only 255 is accepted)")]
    PnmMaxval { path: PathBuf, maxval: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by malformed inputs on disk rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::PnmHeader { .. }
                | Error::PnmTruncated { .. }
                | Error::PnmMaxval { .. }
                | Error::Checkpoint(_)
                | Error::Dataset(_)
                | Error::Io { .. }
                | Error::Shape { .. }
        )
    }
}
