use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("format error in {} at byte {offset}: {msg}", path.display())]
    Format { path: PathBuf, offset: u64, msg: String },
    #[error("{} has unsupported {kind} version {found}; this build reads version {supported}", path.display())]
    UnsupportedVersion {
        path: PathBuf,
        kind: &'static str,
        found: u32,
        supported: u32,
    },
    #[error(transparent)]
    Core(#[from] care_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 2 config/usage, 3 I/O or format, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        use care_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::UnsupportedVersion { .. } => 3,
            Error::Core(C::Config(_) | C::Invalid(_)) => 2,
            Error::Core(C::Diverged { .. } | C::NonFinite { .. }) => 4,
            Error::Core(_) => 3,
        }
    }
}
