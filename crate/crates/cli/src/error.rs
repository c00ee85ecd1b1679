use std::fmt;

/// Exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// The pipeline ran and failed.
    Pipeline = 1,
    /// Bad flags, config or input files.
    Usage = 2,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub trait ResultExt<T> {
    fn usage(self) -> CliResult<T>;
    fn pipeline(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| CliError { kind: ExitKind::Usage, error: e.into() })
    }

    fn pipeline(self) -> CliResult<T> {
        self.map_err(|e| CliError { kind: ExitKind::Pipeline, error: e.into() })
    }
}

pub fn usage(msg: impl fmt::Display) -> CliError {
    CliError { kind: ExitKind::Usage, error: anyhow::anyhow!("{msg}") }
}

pub fn pipeline(msg: impl fmt::Display) -> CliError {
    CliError { kind: ExitKind::Pipeline, error: anyhow::anyhow!("{msg}") }
}
