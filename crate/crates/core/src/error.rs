use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("bitstream format error: {0}")]
    Format(String),

    #[error("bitstream decode error at byte offset {offset}: {detail}")]
    Decode { offset: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("evaluation input error: {0}")]
    EvalInput(String),

    #[error("no overlap: {0}")]
    NoOverlap(String),

    #[error("single-task baseline for `{0}` is zero; relative gain undefined")]
    ZeroBaseline(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Checkpoint(_) => 3,
            Error::Format(_) | Error::Decode { .. } => 4,
            Error::EvalInput(_) | Error::NoOverlap(_) | Error::ZeroBaseline(_) => 5,
            _ => 1,
        }
    }
}
