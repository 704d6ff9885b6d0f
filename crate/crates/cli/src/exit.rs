use std::fmt;

use apsmon::Error;

/// Input could not be read or parsed.
pub const EXIT_PARSE: i32 = 2;
/// Input parsed but violates a constraint.
pub const EXIT_CONSTRAINT: i32 = 3;
/// Saturated threshold under `--strict`.
pub const EXIT_SATURATED: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn parse(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_PARSE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn constraint(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_CONSTRAINT,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } => EXIT_PARSE,
            _ => EXIT_CONSTRAINT,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_PARSE,
            error: e.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}
