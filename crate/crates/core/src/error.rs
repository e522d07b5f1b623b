use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported pixel format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("qp {qp} outside valid range 0..=51")]
    InvalidQp { qp: i64 },
    #[error("unsupported qp {qp}; supported set is {supported:?}")]
    UnsupportedQp { qp: u8, supported: Vec<u8> },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("patch size {patch} exceeds frame {height}x{width}")]
    InvalidPatch {
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input {height}x{width} too small; minimum supported is {min}x{min}")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("non-finite loss term {term}")]
    NonFiniteLoss { term: String },
    #[error("training diverged: non-finite {term} at step {step}")]
    TrainingDiverged { step: u64, term: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
