use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("missing input `{}`", .0.display())]
    MissingInput(PathBuf),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("stage `{stage}` was produced with a different configuration; rerun with --force to overwrite")]
    ConfigMismatch { stage: String },

    #[error(transparent)]
    Core(#[from] harforge_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 internal, 2 usage or missing input, 3 validation.
    pub fn exit_code(&self) -> i32 {
        use harforge_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::MissingInput(_) => 2,
            CliError::Validation(_) | CliError::ConfigMismatch { .. } => 3,
            CliError::Core(E::Io(_) | E::Diverged { .. }) => 1,
            CliError::Core(_) => 3,
            CliError::Io { .. } | CliError::Json(_) => 1,
        }
    }
}
