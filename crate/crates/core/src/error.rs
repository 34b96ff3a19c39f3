use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, trace: Vec<f64> },

    #[error("training diverged in {role} at epoch {epoch}")]
    DivergedIn {
        role: String,
        epoch: usize,
        trace: Vec<f64>,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
