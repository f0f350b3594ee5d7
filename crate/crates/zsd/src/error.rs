use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Core {
        path: PathBuf,
        #[source]
        source: zsd_core::Error,
    },
    #[error(transparent)]
    Model(#[from] zsd_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        line: usize,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for problems with user-supplied configuration rather than data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Model(zsd_core::Error::Config(_))
                | Error::Core {
                    source: zsd_core::Error::Config(_),
                    ..
                }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
