use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("inconsistent path: class {name:?} at level {level} appears under parents {first:?} and {second:?}")]
    InconsistentPath {
        level: usize,
        name: String,
        first: String,
        second: String,
    },

    #[error("index out of range: {what} = {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("level order: coarse level {coarse} must be below fine level {fine}")]
    LevelOrder { fine: usize, coarse: usize },

    #[error("dimension mismatch: {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("parse error in {source_name} at line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("unknown class {name:?} at level {level:?}")]
    UnknownClass { level: String, name: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite gradient in {layer} at step {step}")]
    NonFiniteGradient { layer: String, step: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("batch misalignment: weak views {weak}, strong views {strong}")]
    IndexMisalignment { weak: usize, strong: usize },

    #[error("negative queue is empty")]
    EmptyQueue,

    #[error("missing split: {0}")]
    MissingSplit(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("hash mismatch: {0}")]
    HashMismatch(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Broad category used for process exit codes and FFI status codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::LevelOrder { .. } => ErrorCategory::Config,
            Error::NonFiniteGradient { .. }
            | Error::ArchitectureMismatch(_)
            | Error::IndexMisalignment { .. }
            | Error::EmptyQueue
            | Error::MissingSplit(_) => ErrorCategory::Train,
            _ => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Train,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Train => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
