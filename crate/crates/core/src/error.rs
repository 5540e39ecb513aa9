use thiserror::Error;

use crate::autodiff::OpTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by `{op}`")]
    NonFiniteValue { op: OpTag },
    #[error("node {0} is not on this tape")]
    InvalidNode(usize),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("labels invalid for loss: {0}")]
    Label(String),
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("invalid reference count k={k} for batch size {batch}")]
    InvalidK { k: usize, batch: usize },
    #[error("invalid attribution: {0}")]
    InvalidAttribution(String),
    #[error("masking strategy used before fitting")]
    NotFitted,
    #[error("format error: {0}")]
    Format(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("target has zero variance")]
    DegenerateTarget,
    #[error("attribution vector is all zero")]
    DegenerateAttribution,
    #[error("paired differences have zero variance")]
    DegeneratePairs,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
