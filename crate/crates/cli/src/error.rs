use std::fmt;

/// Failure category, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            Kind::Config => "config error",
            Kind::Data => "data error",
            Kind::Numeric => "numeric failure",
        };
        write!(f, "{tag}: {:#}", self.error)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

pub trait Categorize<T> {
    fn kind(self, kind: Kind) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Categorize<T> for Result<T, E> {
    fn kind(self, kind: Kind) -> CliResult<T> {
        self.map_err(|e| CliError { kind, error: e.into() })
    }
}

/// Core errors keep `kind` unless they report a non-finite value.
pub fn core(e: kbsg_core::Error, kind: Kind) -> CliError {
    let kind = if matches!(e, kbsg_core::Error::NonFinite(_)) { Kind::Numeric } else { kind };
    CliError { kind, error: e.into() }
}

pub fn fail(kind: Kind, msg: impl fmt::Display) -> CliError {
    CliError {
        kind,
        error: anyhow::anyhow!("{msg}"),
    }
}
