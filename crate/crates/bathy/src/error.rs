use std::path::PathBuf;

pub type Result<T, E = BathyError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum BathyError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}:{line}: {msg}")]
    Parse { origin: String, line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bathy_core::Error),
}

impl BathyError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(origin: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Self::Parse { origin: origin.into(), line, msg: msg.into() }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| BathyError::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| BathyError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| BathyError::io(path, e))
}
