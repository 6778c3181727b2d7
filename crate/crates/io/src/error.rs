use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IoError> = core::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<IoError> },
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic { offset: usize, expected: String, found: String },
    #[error("unknown dtype {value} at byte {offset}")]
    UnknownDtype { offset: usize, value: u8 },
    #[error("truncated at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("{extra} trailing bytes after byte {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("invalid value {value} at byte {offset}")]
    InvalidValue { offset: usize, value: String },
    #[error("expected {expected} data, found {found}")]
    WrongDtype { expected: &'static str, found: &'static str },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("{failed} gradient checks failed")]
    GradCheck { failed: usize },
    #[error(transparent)]
    Core(#[from] comma_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io { path: path.into(), source }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ (IoError::Io { .. } | IoError::File { .. }) => e,
            e => IoError::File { path: path.into(), source: Box::new(e) },
        }
    }

    /// The error with file context stripped.
    pub fn root(&self) -> &IoError {
        match self {
            IoError::File { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit status: 3 for numerical failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            IoError::Core(comma_core::Error::NonFiniteLoss { .. }) | IoError::GradCheck { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| IoError::io(path, e))
}

pub(crate) fn write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub(crate) fn create_dir(path: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| IoError::io(path, e))
}
