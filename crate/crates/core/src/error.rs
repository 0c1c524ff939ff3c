use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("infeasible parallel config: {0}")]
    Infeasible(String),

    #[error("conditioning mode mismatch: expected {expected}, got {got}")]
    ConditioningMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("unknown device {0}")]
    UnknownDevice(usize),

    #[error("no message from {src} to {dst} with tag {tag:?}")]
    NoMessage { src: usize, dst: usize, tag: String },

    #[error("collective {op}: {msg}")]
    Collective { op: &'static str, msg: String },

    #[error(
        "kv buffer inconsistent at step {step}, block {block}, unit {unit}: device {device} deviates by {max_abs:e}"
    )]
    KvInconsistent {
        step: usize,
        block: usize,
        unit: usize,
        device: usize,
        max_abs: f64,
    },

    #[error("no feasible plan among {0} candidates")]
    NoFeasiblePlan(usize),

    #[error("bad tensor file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
