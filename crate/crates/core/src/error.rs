use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("structural error: {message} (hint: {hint})")]
    Structural { message: String, hint: String },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("nothing to report: {0}")]
    EmptyReport(String),
}

impl Error {
    /// Stable machine-readable category, used by the CLI for error output and
    /// exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::Structural { .. } => "structural",
            Error::UnsupportedModel(_) => "unsupported_model",
            Error::Io { .. } => "io",
            Error::Format { .. } | Error::Json(_) | Error::Csv(_) => "format",
            Error::EmptyReport(_) => "empty_report",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "input" | "dimension" | "index" => 2,
            "config" | "unsupported_model" => 3,
            "structural" => 4,
            "io" => 5,
            "format" => 6,
            "empty_report" => 7,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn structural(message: impl Into<String>, hint: impl Into<String>) -> Self {
        Error::Structural {
            message: message.into(),
            hint: hint.into(),
        }
    }
}
