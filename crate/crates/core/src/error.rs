use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    /// A row with zero norm was fed to a cosine similarity.
    #[error("row {row} has zero norm")]
    DegenerateRow { row: usize },

    #[error("user {user} has interacted with every item; no negative can be drawn")]
    NegativeSamplingStall { user: u32 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "Io",
            Error::MalformedLine { .. } => "MalformedLine",
            Error::EmptyDataset => "EmptyDataset",
            Error::DegenerateRow { .. } => "DegenerateRow",
            Error::NegativeSamplingStall { .. } => "NegativeSamplingStall",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Config(_) => "ConfigParseError",
            Error::InvalidArgument(_) => "InvalidArgument",
        }
    }
}
