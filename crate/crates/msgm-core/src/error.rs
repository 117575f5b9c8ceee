use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum MsgmError {
    /// Incompatible tensor shapes for an operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller violated an operation contract (non-scalar loss, asymmetric
    /// adjacency, and so on).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problems with user-supplied data (labels out of range, heterogeneous
    /// channel counts, duplicate trials, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed on-disk artifacts (EEGB files, checkpoints, manifests).
    #[error("format error: {0}")]
    Format(String),

    /// A recording is too short for the requested segmentation.
    #[error("recording too short: have {have} samples, need at least {need}")]
    TooShort { have: usize, need: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MsgmError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MsgmError::Shape { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        MsgmError::Contract { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, MsgmError>;
