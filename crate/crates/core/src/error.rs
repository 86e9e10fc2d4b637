use crate::params::ParamError;
use crate::tensor::TensorError;

/// Errors raised while building or running a model.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown band '{0}'")]
    UnknownBand(String),
    #[error("image extent {got:?} incompatible with the backbone: {reason}")]
    Extent { got: (usize, usize), reason: String },
    #[error("metadata out of range: {0}")]
    Metadata(String),
    #[error("{0}")]
    Attachment(String),
}

pub(crate) fn config_err(msg: impl Into<String>) -> ModelError {
    ModelError::Config(msg.into())
}
