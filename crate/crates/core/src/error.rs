use serde::{Deserialize, Serialize};

pub type Result<T, E = VipError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum VipError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("incompatible version: {0}")]
    Version(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Machine-readable error classes shared by the service, CLI and FFI layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Validation,
    NotFound,
    Conflict,
    Infeasible,
    Numerical,
    Version,
}

impl VipError {
    pub fn code(&self) -> ErrorCode {
        match self {
            VipError::InvalidInput(_)
            | VipError::DegenerateGeometry(_)
            | VipError::Degenerate(_)
            | VipError::Integrity(_)
            | VipError::Parse { .. } => ErrorCode::Validation,
            VipError::Infeasible(_) => ErrorCode::Infeasible,
            VipError::Numerical(_) | VipError::Io(_) => ErrorCode::Numerical,
            VipError::NotFound(_) => ErrorCode::NotFound,
            VipError::Conflict(_) => ErrorCode::Conflict,
            VipError::Version(_) => ErrorCode::Version,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VipError::InvalidInput(msg.into())
    }
}
