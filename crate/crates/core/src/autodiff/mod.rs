//! Dense tensors with tape-based reverse-mode differentiation.

mod params;
mod tape;
mod tensor;

pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;
