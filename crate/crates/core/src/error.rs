use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
///
/// The CLI maps each variant family onto a stable exit code, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation in {file} line {line}: {message}")]
    Schema {
        file: String,
        line: usize,
        message: String,
    },

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// 0 ok, 2 config, 3 I/O, 4 schema, 5 incompatibility, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Schema { .. } => 4,
            Error::Incompatible(_) => 5,
            _ => 1,
        }
    }
}
