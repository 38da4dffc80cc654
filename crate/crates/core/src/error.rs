use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{file}: malformed number {text:?} at row {row}, column {col}")]
    MalformedNumber {
        file: PathBuf,
        row: usize,
        col: usize,
        text: String,
    },

    #[error("{file}: expected shape {expected_rows}x{expected_cols}, {detail}")]
    DimensionMismatch {
        file: PathBuf,
        expected_rows: usize,
        expected_cols: usize,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("non-finite loss at epoch {epoch}: {breakdown}")]
    NonFiniteLoss { epoch: usize, breakdown: String },

    #[error("band [{lo}, {hi}) holds no checkpoint{}", nearest.map(|(l, h)| format!("; nearest populated band is [{l}, {h})")).unwrap_or_else(|| "; no band was reached".to_string()))]
    EmptyBand {
        lo: f64,
        hi: f64,
        nearest: Option<(f64, f64)>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
