//! A small reverse-mode differentiation engine over dense `f32` tensors.
//!
//! Values are recorded on a [`Graph`] in execution order and differentiated
//! by walking the tape backwards. Reductions accumulate in `f64`.

mod gemm;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use graph::{Graph, NodeId, GATHER_NONE};
pub use params::{ParamId, Parameter, ParameterSet, UpdateRule};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty support in row {row}: no legal moves")]
    EmptySupport { row: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
}
