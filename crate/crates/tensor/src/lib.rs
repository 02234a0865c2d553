//! Minimal dense tensor kernel with tape-based reverse-mode autodiff.

mod error;
mod float;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
pub mod rng;
mod tensor;

pub use error::{invalid, Result, TensorError};
pub use float::Float;
pub use graph::{Graph, Var};
pub use kernels::AttnMask;
pub use params::{Bound, ParamEntry, ParamId, ParamSet};
pub use rng::Rng;
pub use tensor::Tensor;
