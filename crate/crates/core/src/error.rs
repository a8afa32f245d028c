use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("loss passed to backward must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("sample `{id}`: label {value} at (row {row}, col {col}) is outside [0, {max}]")]
    LabelOutOfRange {
        id: String,
        row: usize,
        col: usize,
        value: u32,
        max: u32,
    },

    #[error("sample `{id}`: size mismatch, {detail}")]
    SizeMismatch { id: String, detail: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("palette has no entry for class {0}")]
    MissingPalette(u32),

    #[error("stage `{stage}` requires the `{missing}` checkpoint at {}", .path.display())]
    MissingPrerequisite {
        stage: String,
        missing: String,
        path: PathBuf,
    },

    #[error("class count mismatch: checkpoint has {checkpoint}, corpus has {corpus}")]
    ClassCountMismatch { checkpoint: usize, corpus: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
