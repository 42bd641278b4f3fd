use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Every variant maps to a data error at the CLI boundary (exit status 1);
/// usage errors are handled by the argument parser before any of these arise.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("corrupt run-length encoding: {0}")]
    Corrupt(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label-space error: {0}")]
    LabelSpace(String),

    #[error("decoder contract violation: expected {expected} predictions, got {got}")]
    DecoderContract { expected: usize, got: usize },

    #[error("infeasible assignment: {rows} ground-truth segments but only {cols} predictions")]
    Infeasible { rows: usize, cols: usize },

    #[error("missing class probabilities on prediction {0}")]
    MissingClassProbs(usize),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("invalid part subset: {0}")]
    Subset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error in image {image}: {detail}")]
    Integrity { image: String, detail: String },

    #[error("png error in {path}: {detail}")]
    Png { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short category name used in CLI messages and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Corrupt(_) => "corrupt",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::LabelSpace(_) => "label-space",
            Error::DecoderContract { .. } => "decoder-contract",
            Error::Infeasible { .. } => "infeasible",
            Error::MissingClassProbs(_) => "missing-class-probs",
            Error::Provenance(_) => "provenance",
            Error::Subset(_) => "subset",
            Error::Format(_) => "format",
            Error::Integrity { .. } => "integrity",
            Error::Png { .. } => "png",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
