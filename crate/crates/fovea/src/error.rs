//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI reports them: configuration and
/// usage problems, data problems, and training failures map to distinct
/// process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// Problems with datasets, files, or input values (exit code 3).
    #[error("data error: {0}")]
    Data(String),

    /// Shape disagreement between tensors.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// A training run failed (exit code 4).
    #[error("training failure: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for the CLI: 2 usage, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Shape { .. } | Error::Io(_) | Error::Image(_) => 3,
            Error::Training(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for a [`Error::Shape`] from two displayable shapes.
pub fn shape_error(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::Shape {
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
