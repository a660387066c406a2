//! Differentiable dense-tensor substrate: values, reverse-mode ops, the
//! gradient checker, Adam, and checkpoint serialization.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{config_hash, file_digest, Checkpoint, CheckpointMeta, Dtype};
pub use gradcheck::{eval_graph, grad_check};
pub use graph::{gelu, gelu_grad, Graph, NodeGrads, NodeId};
pub use params::{ParamEntry, ParamGrads, ParamStore};
pub use tensor::{dot, log_sum_exp, softmax_in_place, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("tensor [{rows} x {cols}] needs {} values, got {len}", rows * cols)]
    BadData { rows: usize, cols: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("function output must be scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
