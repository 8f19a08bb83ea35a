//! Exit-code classification for command failures.

use std::fmt;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad flags, bad config values.
    Usage,
    /// Missing or malformed input data.
    Data,
    /// Training or evaluation failed.
    Runtime,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            ExitKind::Usage => 1,
            ExitKind::Data => 2,
            ExitKind::Runtime => 3,
        }
    }
}

impl From<ExitKind> for ExitCode {
    fn from(k: ExitKind) -> ExitCode {
        ExitCode::from(k.code())
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn or_exit(self, kind: ExitKind) -> CmdResult<T>;

    fn usage(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.or_exit(ExitKind::Usage)
    }

    fn data(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.or_exit(ExitKind::Data)
    }

    fn runtime(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.or_exit(ExitKind::Runtime)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_exit(self, kind: ExitKind) -> CmdResult<T> {
        self.map_err(|e| Failure {
            kind,
            error: e.into(),
        })
    }
}

pub fn fail<T>(kind: ExitKind, error: anyhow::Error) -> CmdResult<T> {
    Err(Failure { kind, error })
}
