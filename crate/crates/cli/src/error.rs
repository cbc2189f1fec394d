use std::fmt;

use serde::Serialize;
use thiserror::Error;
use trsbts_core::Error as CoreError;

/// Failure class, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
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

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Config => "config error",
            Kind::Data => "data error",
            Kind::Numeric => "numeric failure",
        })
    }
}

#[derive(Debug, Error)]
#[error("{kind}: {message}")]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Config,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Data,
            message: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Single-line JSON trailer for machine consumers.
    pub fn trailer(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind,
                "exit_code": self.exit_code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        use CoreError::*;
        let kind = match &e {
            Config(_) | Unsupported(_) => Kind::Config,
            Io(_) | Parse(_) | DimMismatch { .. } | BadLength(_) | ShapeMismatch(_) | TooShort { .. }
            | InsufficientData(_) | EmptyInput(_) | DegeneratePath(_) | MissingStats | KnotMismatch(_) => Kind::Data,
            _ => Kind::Numeric,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data(e.to_string())
    }
}
