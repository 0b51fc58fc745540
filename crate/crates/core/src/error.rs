use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Geometry that cannot be realized (e.g. a non-integral conv output).
    #[error("invalid shape: {0}")]
    Shape(String),

    /// A layer stack does not chain.
    #[error("network build failed at layer {layer} ({kind}): {reason}")]
    Build {
        layer: usize,
        kind: &'static str,
        reason: String,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingestion failed for {}: {reason} (byte offset {offset})", path.display())]
    Ingest {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
