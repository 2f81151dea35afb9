use gst_core::geometry::GeometryError;
use gst_core::quantizer::QuantizerError;
use gst_core::sequence::SequenceError;

use crate::tokenizer::TokenizerError;
use crate::transformer::ModelError;

pub type Result<T, E = GstError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum GstError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("directory {0} already holds a dataset generated with different parameters")]
    ManifestConflict(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("geometry: {0}")]
    Geometry(GeometryError),
    #[error("quantizer: {0}")]
    Quantizer(#[from] QuantizerError),
    #[error("sequence: {0}")]
    Sequence(#[from] SequenceError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] TokenizerError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
}

impl GstError {
    /// Process exit code: 1 for usage problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            GstError::Usage(_) => 1,
            _ => 2,
        }
    }
}
