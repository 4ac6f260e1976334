//! Error envelope shared by the library and the CLI.
//!
//! Every failure is one of four categories so the CLI can emit a single
//! machine-parseable line and a stable exit code.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Bad configuration value; names the offending key or field.
    Config { key: String, msg: String },
    /// Filesystem / serialization failure; names the offending path.
    Io { path: String, msg: String },
    /// A caller violated an operation's precondition.
    Contract { msg: String },
    /// Non-finite or otherwise numerically invalid state.
    Numeric { msg: String },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }
    pub fn io(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Io { path: path.into(), msg: msg.into() }
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract { msg: msg.into() }
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric { msg: msg.into() }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Contract { .. } => "contract",
            Error::Numeric { .. } => "numeric",
        }
    }

    /// Stable per-category exit code for the CLI (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } => 3,
            Error::Contract { .. } => 4,
            Error::Numeric { .. } => 5,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config { key, msg } => {
                write!(f, "category=config key={} msg={:?}", key, msg)
            }
            Error::Io { path, msg } => write!(f, "category=io path={} msg={:?}", path, msg),
            Error::Contract { msg } => write!(f, "category=contract msg={:?}", msg),
            Error::Numeric { msg } => write!(f, "category=numeric msg={:?}", msg),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { path: String::new(), msg: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_is_one_line_and_tagged() {
        let e = Error::config("beta_start", "must be in (0,1)");
        let s = e.to_string();
        assert!(s.starts_with("category=config key=beta_start"));
        assert!(!s.contains('\n'));
        assert_eq!(e.exit_code(), 2);
    }
}
