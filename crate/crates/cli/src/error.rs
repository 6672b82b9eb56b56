use std::fmt;
use std::path::Path;

use latent_critic::{Error, ErrorClass};

/// An error as shown to the user: stable code, class (exit status) and message.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub class: ErrorClass,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            class: ErrorClass::Usage,
            message: message.into(),
        }
    }

    pub fn data(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            class: ErrorClass::Data,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: e.code(),
            class: e.class(),
            message: e.to_string(),
        }
    }
}

/// Attaches the file a core error came from.
pub trait Context<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> Context<T> for latent_critic::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| {
            let mut c = CliError::from(e);
            c.message = format!("{}: {}", path.display(), c.message);
            c
        })
    }
}
