//! Command failures and their process exit codes.

use std::fmt;

use episeg::Error;

#[derive(Debug)]
pub enum Failure {
    /// Exit 2.
    Config(anyhow::Error),
    /// Exit 3.
    MissingInput(anyhow::Error),
    /// Exit 4.
    Numeric(anyhow::Error),
    /// Exit 1.
    Other(anyhow::Error),
}

impl Failure {
    pub fn missing(e: impl Into<anyhow::Error>) -> Self {
        Failure::MissingInput(e.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::MissingInput(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::MissingInput(e) | Failure::Numeric(e) | Failure::Other(e) => e,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::InvalidConfig(_) => Failure::Config(e.into()),
            Error::NonFinite(_) | Error::Undefined(_) | Error::TooFewSamples { .. } => Failure::Numeric(e.into()),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::MissingInput(e.into())
            }
            _ => Failure::Other(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure::Other(e),
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;
