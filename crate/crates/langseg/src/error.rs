use std::path::{Path, PathBuf};

/// Everything that can go wrong outside the numeric core.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] langseg_core::Error),
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 usage/config/IO, 3 numeric failure, 4 artifact mismatch.
    pub fn exit_code(&self) -> i32 {
        use langseg_core::Error as E;
        match self {
            AppError::Mismatch(_) => 4,
            AppError::Core(E::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

/// Reads a whole file, naming the path on failure.
pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}

/// Writes a whole file, creating parent directories.
pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}
