use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] diffcore::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at byte {offset}: {detail}")]
    Parse {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("malformed {what} at line {line}: {detail}")]
    ParseLine {
        what: &'static str,
        line: usize,
        detail: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numeric abort: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: &'static str, offset: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            what,
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Engine(diffcore::Error::Config(_)) => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::ParseLine { .. } => 3,
            Error::Numeric(_) | Error::Engine(diffcore::Error::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
