use std::path::PathBuf;

use thiserror::Error;

/// Errors of the IO and orchestration layer.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("subject {subject}: {message}")]
    Ingest { subject: String, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("text provider error: {0}")]
    Provider(String),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: Box<AppError> },
    #[error(transparent)]
    Core(#[from] brainscl_core::Error),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        AppError::Format { path: path.into(), message: message.to_string() }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ AppError::Stage { .. } => e,
            e => AppError::Stage { stage: stage.to_string(), source: Box::new(e) },
        }
    }

    /// 2 for bad input, configuration or usage; 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use brainscl_core::Error as C;
        match self {
            AppError::Ingest { .. }
            | AppError::Validation(_)
            | AppError::Config(_)
            | AppError::Usage(_)
            | AppError::MissingArtifacts(_) => 2,
            AppError::Core(C::Config(_) | C::Cohort { .. }) => 2,
            AppError::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
