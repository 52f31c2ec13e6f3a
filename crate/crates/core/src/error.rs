// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by model construction, interventions, evaluation and the
/// knockout drivers.
#[derive(Debug, Error)]
pub enum TaloError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("layer index {index} out of range for a {layers}-layer model")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("invalid intervention: {0}")]
    Intervention(String),

    #[error("invalid task suite: {0}")]
    Suite(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("probe pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("evaluation failed at layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<TaloError>,
    },

    #[error("protocol error at byte {offset}: {message}")]
    Protocol { offset: usize, message: String },

    #[error("remote error: {0}")]
    Remote(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TaloError {
    pub(crate) fn at_layer(layer: usize, source: TaloError) -> Self {
        Self::AtLayer {
            layer,
            source: Box::new(source),
        }
    }

    pub(crate) fn protocol(offset: usize, message: impl Into<String>) -> Self {
        Self::Protocol {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TaloError>;
