// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use crate::vit::HeadId;

/// Errors produced by kernels, the engine and the analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A kernel produced or received a NaN/Inf value.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A required tensor is absent from a weight container.
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    /// A tensor is present but has the wrong shape.
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A head index outside the model.
    #[error("invalid head {head} for a model with {layers} layers x {heads} heads")]
    InvalidHead {
        head: HeadId,
        layers: usize,
        heads: usize,
    },

    /// Attention override value outside [0, 1].
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f32),

    /// A requested capture was not recorded in the trace.
    #[error("trace has no capture for {0}")]
    MissingCapture(String),

    /// Caller supplied arguments that violate an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Iterative numeric routine failed to converge.
    #[error("{0} did not converge")]
    NoConvergence(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("tensor container error in {context}: {detail}")]
    Container { context: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidInput(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
