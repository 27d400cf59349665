use std::fmt;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_EMPTY: i32 = 3;
pub const EXIT_SIZE: i32 = 4;
pub const EXIT_INVARIANT: i32 = 5;

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn size(message: impl Into<String>) -> Self {
        Self { code: EXIT_SIZE, message: message.into() }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self { code: EXIT_INVARIANT, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<filterprior::Error> for CliError {
    fn from(e: filterprior::Error) -> Self {
        use filterprior::Error::*;
        let code = match e {
            EmptyBank => EXIT_EMPTY,
            NonFinite { .. } | Invariant(_) => EXIT_INVARIANT,
            _ => EXIT_INPUT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}
