//! Dense `f64` tensors with reverse-mode differentiation, AdamW and a
//! warm-up schedule. All model math in the crate runs through [`Tape`].

mod init;
mod optim;
mod params;
mod tape;
mod tensor;

pub use init::{component_rng, derive_seed, normal, xavier};
pub use optim::{AdamW, AdamWConfig, OptimizerState, WarmupSchedule};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid, BnBuffers, Gradients, ParamGrads, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::bce_value;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
