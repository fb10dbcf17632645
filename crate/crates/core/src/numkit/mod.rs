//! Dense tensors with a reverse-mode gradient tape.
//!
//! Only the primitives the denoiser needs are provided. Broadcasting is
//! limited to trailing-axis bias adds and row-group modulation. Every public
//! operation rejects non-finite results.

mod ops;
mod tape;
mod tensor;

pub use ops::{cross_entropy, gelu, layer_norm_core, matmul, matmul_nt, softmax, LayerNormOutput, LN_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("variable is not recorded on this tape")]
    MissingDependency,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
