//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform to the operation's contract.
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    /// Invalid configuration value; the message names the offending field path.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Invalid runtime input (bad token id, empty eval set, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A `Var` handle was used with a graph it does not belong to.
    #[error("variable belongs to graph {got}, not graph {expected}")]
    ForeignGraph { expected: u64, got: u64 },

    /// `backward` was called on a non-scalar node.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// No gradient is available for the requested node.
    #[error("no gradient recorded for node {index}: {reason}")]
    MissingGrad { index: usize, reason: String },

    /// NaN or infinity encountered where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training aborted on a non-finite total loss.
    #[error("non-finite loss at step {step}: benign={benign}, adversarial={adversarial}, delta_norm={delta_norm}")]
    TrainingDiverged {
        step: usize,
        benign: f64,
        adversarial: f64,
        delta_norm: f64,
    },

    /// Checkpoint file is malformed or inconsistent with its config.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
