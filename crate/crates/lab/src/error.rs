use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] rpa_core::Error),
    #[error("non-finite loss at step {step} (epoch {epoch}, context {context}): {snapshot}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        context: usize,
        snapshot: String,
    },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Io { .. } | LabError::Format(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
