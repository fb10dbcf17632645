//! Embedding inversion by conditional masked diffusion.
//!
//! A frozen encoder maps token sequences to unit vectors; this crate trains a
//! masked diffusion denoiser whose layer norms are modulated by that vector
//! and decodes sequences back from it. All numeric code is generic over the
//! element type; the aliases below fix it for the two supported precisions.
//!
//! The decoders consume only `(params, embedding)`. Nothing in this crate
//! can evaluate the target encoder.

pub mod cache;
pub mod corpus;
pub mod decode;
pub mod diffusion;
pub mod model;
pub mod numkit;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

/// Single-precision tensor, used by training runs.
pub type Tensor32 = numkit::Tensor<f32>;
/// Double-precision tensor, used by gradient checks.
pub type Tensor64 = numkit::Tensor<f64>;
pub type Tape32 = numkit::Tape<f32>;
pub type Tape64 = numkit::Tape<f64>;
pub type Params32 = model::DenoiserParams<f32>;
pub type Params64 = model::DenoiserParams<f64>;
