use std::path::PathBuf;

/// Errors produced anywhere in the pretraining pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("format error in {} at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at step {step} (epoch {epoch}); last good checkpoint: {last_good}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        last_good: String,
    },
}

impl Error {
    pub fn invalid_arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
