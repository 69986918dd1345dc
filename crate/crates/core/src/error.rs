use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("non-finite coordinate produced by affine transform at point {index}: ({x}, {y}, {z})")]
    NonFiniteTransform { index: usize, x: f64, y: f64, z: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("patch set state: {0}")]
    PatchState(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidCloud(_) => "invalid-cloud",
            Error::NonFiniteTransform { .. } => "non-finite",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DegenerateMask(_) => "degenerate-mask",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::PatchState(_) => "patch-state",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingFile(_) => "missing-file",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }
}
