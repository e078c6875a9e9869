use thiserror::Error;

/// Errors surfaced by the codec.
#[derive(Error, Debug)]
pub enum CodecError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("backward called on non-scalar tensor (len {0})")]
    NonScalarLoss(usize),

    #[error("gradients not populated for `{0}`")]
    MissingGrad(String),

    #[error("bitstream error: {0}")]
    Bitstream(String),

    #[error("entropy coder desync: sentinel mismatch")]
    Desync,

    #[error("symbol {0} outside pmf support [{1}, {2}]")]
    SymbolOutOfRange(i32, i32, i32),

    #[error("training diverged (non-finite loss at iteration {0})")]
    Diverged(usize),

    #[error("image error: {0}")]
    Image(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;
