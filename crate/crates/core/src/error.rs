use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LsanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LsanError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value passed to {op}")]
    NumericDomain { op: &'static str },

    #[error("softmax slice {slice} has every entry masked")]
    DegenerateSlice { slice: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion failed: {malformed} of {lines} lines malformed, e.g. {samples:?}")]
    Ingest {
        malformed: usize,
        lines: usize,
        samples: Vec<String>,
    },

    #[error("no interactions survive filtering")]
    EmptyDataset,

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
}

impl LsanError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LsanError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        LsanError::Contract(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LsanError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        LsanError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
