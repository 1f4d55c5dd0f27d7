use alloc::string::String;
use thiserror::Error;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// A `Var` from one tape was used with another tape.
    #[error("tensor is not on this tape")]
    NotOnTape,
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("no class has a defined average precision")]
    NoDefinedClasses,
}

pub type Result<T> = core::result::Result<T, CoreError>;
