use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("project root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("zero parseable source files under {0}")]
    NoSources(PathBuf),
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid signature `{0}`: {1}")]
    Signature(String, String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("test runner: {0}")]
    Runner(String),
    #[error("provider: {0}")]
    Provider(#[from] crate::llm::LlmError),
    #[error("instrumentation: {0}")]
    Instrument(String),
    #[error("{0}")]
    Internal(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Infrastructure errors map to CLI exit code 2, domain failures to 1.
    pub fn is_infrastructure(&self) -> bool {
        !matches!(self, Error::Provider(_))
    }
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
