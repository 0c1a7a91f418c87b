//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: usage/config
//! problems, data problems (inputs, files, checkpoints), and numeric failures
//! (non-finite values, diverged training).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or API misuse (wrong shapes, invalid options).
    #[error("config error: {0}")]
    Config(String),

    /// Shape mismatch between tensors; message carries both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed or inconsistent input data (sequences, datasets, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or numerically failed training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Filesystem problem, annotated with the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(Error::config("x").exit_code(), 1);
        assert_eq!(Error::shape("x").exit_code(), 1);
        assert_eq!(Error::data("x").exit_code(), 2);
        assert_eq!(
            Error::io("p", std::io::Error::new(std::io::ErrorKind::Other, "e")).exit_code(),
            2
        );
        assert_eq!(Error::numeric("x").exit_code(), 3);
    }
}
