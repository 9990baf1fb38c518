use parauni_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: u32, vocab: usize },
    #[error("prompt of length {len} not in 1..={max}")]
    PromptLength { len: usize, max: usize },
    #[error("layer index {layer} outside 1..={layers}")]
    LayerIndex { layer: usize, layers: usize },
    #[error("expected {expected} layer features, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{0}")]
    Domain(String),
    #[error("transition {step} has zero standard deviation")]
    DegenerateDensity { step: usize },
    #[error("no gradients present")]
    NoGradients,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
