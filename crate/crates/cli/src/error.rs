use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing input {path}: {what}")]
    MissingInput { path: PathBuf, what: String },

    #[error("invariant failed: {0}")]
    Invariant(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: glowq::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// 0 success, 1 validation or input, 2 numerical, 3 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 3,
            CliError::Core { source, .. } if source.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl From<glowq::Error> for CliError {
    fn from(source: glowq::Error) -> Self {
        CliError::Core { context: "glowq".into(), source }
    }
}

pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, glowq::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core { context: what(), source })
    }
}

impl<T> Context<T> for std::result::Result<T, std::io::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Io { context: what(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::config("x").exit_code(), 1);
        assert_eq!(CliError::Invariant("x".into()).exit_code(), 3);
        let numeric = glowq::Error::NoConvergence { algorithm: "svd", sweeps: 3 };
        assert_eq!(CliError::from(numeric).exit_code(), 2);
        let shape = glowq::Error::Shape("bad".into());
        assert_eq!(CliError::from(shape).exit_code(), 1);
    }
}
