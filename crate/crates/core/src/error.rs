use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("axis error: axis {axis} is invalid for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("rank error: {0}")]
    Rank(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("taxonomy error: unknown label {0:?}")]
    Taxonomy(String),
    #[error("duplicate error: path {0:?} appears more than once")]
    Duplicate(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("undefined recall: {0}")]
    UndefinedRecall(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("structure error: {0}")]
    Structure(String),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (arguments, config files,
    /// manifests) rather than failures while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Usage(_)
                | Error::Config(_)
                | Error::Taxonomy(_)
                | Error::Duplicate(_)
                | Error::Capacity(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
