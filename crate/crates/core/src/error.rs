use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {what} at byte {offset}: {detail}")]
    Format {
        what: String,
        offset: u64,
        detail: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status for command-line front ends: 2 usage and shape
    /// errors, 3 data/format and I/O errors, 4 numerical and domain failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Dimension { .. } => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::Numerical(_) | Error::Domain { .. } => 4,
        }
    }

    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            detail: format!("{lhs:?} vs {rhs:?}"),
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// I/O failures inside the CSV layer stay I/O errors; the rest are
    /// format errors at the reported byte.
    pub fn csv(path: &std::path::Path, e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Format {
                what: path.display().to_string(),
                offset: e.position().map(|p| p.byte()).unwrap_or(0),
                detail: e.to_string(),
            },
        }
    }
}
