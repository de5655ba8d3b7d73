use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants are grouped by how the CLI reports them:
/// usage problems exit with 1, data problems with 2, numerical failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: size mismatch on {axis} axis (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),

    #[error("gradient for parameter `{0}` contains NaN")]
    NanGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing counterpart for `{name}`: expected {expected}")]
    MissingPair { name: String, expected: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::InvalidConfig(_) => 1,
            Error::Data(_)
            | Error::MissingPair { .. }
            | Error::Io(_)
            | Error::Image(_)
            | Error::Checkpoint(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
