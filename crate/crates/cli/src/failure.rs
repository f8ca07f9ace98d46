use std::fmt;
use std::process::ExitCode;

use voxseg::Error;

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Other = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    Architecture = 5,
    Tolerance = 6,
}

/// A failed command: the exit status and the message printed to stderr.
#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub message: String,
}

pub type CmdResult<T = ()> = Result<T, Failure>;

impl Failure {
    pub fn new(status: Status, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Status::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Status::Data, message)
    }

    pub fn architecture(message: impl Into<String>) -> Self {
        Self::new(Status::Architecture, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.status as u8)
    }

    /// Prefix the message with what was being attempted.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => Status::Config,
            Error::Data(_) | Error::Format(_) | Error::Dimension(_) | Error::Io(_) => Status::Data,
            Error::Numerical { .. } => Status::Numerical,
            Error::Checkpoint(_) => Status::Architecture,
            Error::State(_) => Status::Other,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(format!("i/o error: {e}"))
    }
}

pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CmdResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CmdResult<T> {
        self.map_err(|e| e.into().context(what))
    }
}
