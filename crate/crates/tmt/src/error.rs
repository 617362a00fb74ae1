use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Validation = 1,
    Numeric = 2,
    Io = 3,
}

#[derive(Debug, Error)]
pub enum AppError {
    /// Invalid configuration, arguments or data shapes; detected before any
    /// output is written.
    #[error("{0}")]
    Validation(String),
    /// Training or checking produced a non-finite or out-of-tolerance value.
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents are malformed.
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl AppError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Validation(_) => ExitCode::Validation,
            Self::Numeric(_) => ExitCode::Numeric,
            Self::Io { .. } | Self::Format { .. } => ExitCode::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

impl From<tmt_core::Error> for AppError {
    fn from(e: tmt_core::Error) -> Self {
        use tmt_core::Error as E;
        match e {
            E::NonFinite { .. } => Self::Numeric(e.to_string()),
            E::Format { .. } => Self::Format {
                path: PathBuf::new(),
                reason: e.to_string(),
            },
            E::Dimension { .. } | E::Config(_) | E::Contract(_) => Self::Validation(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;

/// Attaches `path` to a core format error.
pub(crate) fn at_path(path: &std::path::Path) -> impl FnOnce(tmt_core::Error) -> AppError + '_ {
    move |e| match e {
        tmt_core::Error::Format { .. } => AppError::format(path, e),
        other => other.into(),
    }
}
