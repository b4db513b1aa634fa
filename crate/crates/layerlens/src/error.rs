use std::io;
use std::path::PathBuf;

use layerlens_core::Error as CoreError;

/// Failure of a resume-service call.
#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {endpoint}: {msg}")]
    Unreachable { endpoint: String, msg: String },
    #[error("request to {endpoint} timed out")]
    Timeout { endpoint: String },
    #[error("service does not know sequence {seq_id}")]
    UnknownSequence { seq_id: u32 },
    #[error("protocol error (status {status}): {msg}")]
    Protocol { status: u16, msg: String },
}

impl ClientError {
    /// Whether repeating the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ClientError::Timeout { .. }
                | ClientError::Unreachable { .. }
                | ClientError::Protocol { status: 429 | 503, .. }
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LensError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("endpoint error: {0}")]
    Endpoint(#[from] ClientError),
    #[error("{stage}: {source}")]
    Compute {
        stage: &'static str,
        #[source]
        source: CoreError,
    },
}

impl LensError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        LensError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        LensError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 2 config, 3 environment or endpoint, 4 compute.
    pub fn exit_code(&self) -> i32 {
        match self {
            LensError::Config(_) => 2,
            LensError::Io { .. } | LensError::Format { .. } | LensError::Endpoint(_) => 3,
            LensError::Compute {
                source: CoreError::Backend(_) | CoreError::UnknownSequence { .. },
                ..
            } => 3,
            LensError::Compute { .. } => 4,
        }
    }
}

/// Tags a core error with the pipeline stage that raised it.
pub(crate) trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> Stage<T> for Result<T, CoreError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| LensError::Compute { stage, source })
    }
}

pub type Result<T, E = LensError> = std::result::Result<T, E>;
