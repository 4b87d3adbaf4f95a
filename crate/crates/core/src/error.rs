//! Errors for dataset, image, config, and checkpoint handling.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad image: {detail}")]
    BadImage { path: PathBuf, detail: String },
    #[error("{path}: truncated at byte {offset}, expected {expected} bytes total")]
    TruncatedImage {
        path: PathBuf,
        offset: usize,
        expected: usize,
    },
    #[error("missing frame file {path}")]
    MissingFrame { path: PathBuf },
    #[error("unknown class code {code:?}")]
    UnknownClass { code: String },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error("checkpoint: {detail}")]
    Checkpoint { detail: String },
    #[error("scene geometry: {detail}")]
    SceneGeometry { detail: String },
    #[error("{detail}")]
    Invalid { detail: String },
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> DataError {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(detail: impl Into<String>) -> DataError {
        DataError::Invalid {
            detail: detail.into(),
        }
    }
}
