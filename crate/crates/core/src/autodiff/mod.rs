//! Dense tensors with reverse-mode automatic differentiation.

pub mod checkpoint;
pub mod gumbel;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gumbel::{gumbel_noise, gumbel_softmax, gumbel_softmax_with_noise, one_hot_argmax};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
