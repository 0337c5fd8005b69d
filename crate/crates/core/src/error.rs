use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EditError {
    /// A user-supplied parameter is out of range.
    #[error("configuration error: {0}")]
    Config(String),
    /// Operands have incompatible shapes or violate a precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// The linear system is singular or too ill-conditioned to trust.
    #[error("singular system (condition estimate {condition:e})")]
    Singular { condition: f64 },
    /// Non-finite values or a failed decomposition.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, EditError>;

pub(crate) fn contract(msg: impl Into<String>) -> EditError {
    EditError::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> EditError {
    EditError::Config(msg.into())
}
