use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} at (row {row}, col {col}) is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        col: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload size mismatch: header implies {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("HU value {value} at voxel {index} is outside [-1024, 3071]")]
    HuOutOfRange { index: usize, value: f64 },

    #[error("volume with {n_slices} slices is too thin for 2.5D selection (need at least {min} slices)")]
    TooThin { n_slices: usize, min: usize },

    #[error("training diverged at {stage} step {step}: {detail}")]
    Divergence {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown {kind} strategy '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
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

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
