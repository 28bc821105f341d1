use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("class {class} is not part of the {schema} schema")]
    SchemaViolation { class: String, schema: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sequence of {len} positions exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("reference sequence is empty")]
    EmptyReference,

    #[error("enumeration refused: support could reach {estimate} strings ({reason})")]
    EnumerationRefused { estimate: f64, reason: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("load error in {path}: {}", offenders.join("; "))]
    Load { path: PathBuf, offenders: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status for the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
