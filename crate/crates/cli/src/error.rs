use std::fmt;
use std::path::Path;
use std::process::ExitCode;

/// Failures split by exit code: bad input data (1) vs. everything else (2).
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Invalid(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Invalid(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<gapscope::Error> for CliError {
    fn from(e: gapscope::Error) -> Self {
        use gapscope::Error as E;
        match e {
            E::Validation(_) | E::Format { .. } | E::Truncation { .. } | E::Version { .. } => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
