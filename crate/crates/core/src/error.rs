use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: not a SEMC checkpoint")]
    BadMagic,

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("surgery failed for block {block} layer {layer}: missing `{name}`")]
    SurgerySource {
        block: usize,
        layer: usize,
        name: String,
    },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
