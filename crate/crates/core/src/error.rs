use thiserror::Error;

/// Error type shared across the whole pipeline.
///
/// Variants are grouped by which stage of a run can produce them, so a
/// front end can map them onto distinct exit codes without string matching.
#[derive(Error, Debug)]
pub enum SegError {
    /// Invalid configuration: bad hyperparameter values, incompatible
    /// network settings, malformed config files.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid runtime input to an operation: shape mismatches, values out
    /// of the documented domain, empty inputs where content is required.
    #[error("input error: {0}")]
    Input(String),

    /// Broken or inconsistent dataset content: unreadable studies, missing
    /// slices, contours that do not form closed polygons.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint problems: unknown format version, parameter mismatches
    /// during load or weight transplantation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SegError>;

impl SegError {
    pub fn config(msg: impl Into<String>) -> Self {
        SegError::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        SegError::Input(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        SegError::Data(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        SegError::Checkpoint(msg.into())
    }

    /// Exit code a command line front end should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            SegError::Config(_) => 2,
            SegError::Input(_) | SegError::Data(_) => 3,
            SegError::Checkpoint(_) => 4,
            SegError::Io(_) => 3,
        }
    }

    /// Short machine-readable category name, used in structured error output.
    pub fn category(&self) -> &'static str {
        match self {
            SegError::Config(_) => "config",
            SegError::Input(_) => "input",
            SegError::Data(_) => "data",
            SegError::Checkpoint(_) => "checkpoint",
            SegError::Io(_) => "io",
        }
    }
}
