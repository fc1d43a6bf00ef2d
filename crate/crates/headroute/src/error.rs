use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug)]
pub enum Error {
    Core(headroute_core::Error),
    Io { path: PathBuf, source: io::Error },
    /// A file that parsed but does not follow its format.
    Format { path: PathBuf, message: String },
    Json { path: PathBuf, source: serde_json::Error },
    Csv(csv::Error),
    /// Bad command-line or configuration input.
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => e.kind(),
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Json { .. } => "json",
            Error::Csv(_) => "csv",
            Error::Usage(_) => "usage",
        }
    }

    /// Process exit code: 2 for configuration or input errors, 3 for
    /// numeric failures, 1 for IO and internal errors.
    pub fn exit_code(&self) -> i32 {
        use headroute_core::Error as C;
        match self {
            Error::Core(C::Numeric { .. } | C::SingularSchedule { .. }) => 3,
            Error::Core(C::Internal(_)) => 1,
            Error::Core(_) | Error::Format { .. } | Error::Json { .. } | Error::Usage(_) => 2,
            Error::Io { .. } | Error::Csv(_) => 1,
        }
    }

    /// One-line JSON diagnostic.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Diag<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Diag {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .unwrap_or_else(|_| String::from("{\"error\":\"internal\"}"))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Core(e) => write!(f, "{e}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format { path, message } => write!(f, "{}: {message}", path.display()),
            Error::Json { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Csv(e) => write!(f, "csv: {e}"),
            Error::Usage(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Core(e) => Some(e),
            Error::Io { source, .. } => Some(source),
            Error::Json { source, .. } => Some(source),
            Error::Csv(e) => Some(e),
            _ => None,
        }
    }
}

impl From<headroute_core::Error> for Error {
    fn from(e: headroute_core::Error) -> Self {
        Error::Core(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}
