use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] maskrefine_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Error {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// True for failures caused by numerics (NaN/Inf or divergence) rather
    /// than by inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Core(maskrefine_core::Error::NonFinite { .. } | maskrefine_core::Error::Diverged { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
