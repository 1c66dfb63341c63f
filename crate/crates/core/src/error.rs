use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value violates its invariant.
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    /// Input data is missing, unreadable, or malformed.
    #[error("data error at {}: {message}", path.display())]
    Data { path: PathBuf, message: String },

    #[error("shape mismatch: {message}")]
    Shape { message: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// The trainer failed or broke the wire protocol. `log` carries whatever
    /// diagnostics the session captured.
    #[error("trainer session `{session}` failed: {message}")]
    Trainer {
        session: String,
        message: String,
        log: String,
    },

    #[error("trainer session `{0}` already has a request in flight")]
    SessionBusy(String),

    /// The run was stopped on request after the named stage; the run
    /// directory holds everything needed to resume.
    #[error("run interrupted after {0}")]
    Interrupted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Data {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape {
            message: message.into(),
        }
    }

    pub fn trainer(session: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Trainer {
            session: session.into(),
            message: message.into(),
            log: String::new(),
        }
    }
}
