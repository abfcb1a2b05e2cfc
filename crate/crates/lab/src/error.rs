use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("dataset files not found in {}; expected {}", dir.display(), expected.join(", "))]
    MissingData { dir: PathBuf, expected: Vec<String> },
    #[error("no checkpoint for {model} at {}", path.display())]
    MissingCheckpoint { model: String, path: PathBuf },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Cell {
        context: String,
        #[source]
        source: Box<LabError>,
    },
    #[error(transparent)]
    Core(#[from] spt_core::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(io::Error) -> Self {
        let path = path.as_ref().to_path_buf();
        move |source| LabError::Io { path, source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        LabError::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    pub fn in_cell(self, context: impl Into<String>) -> Self {
        LabError::Cell {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
