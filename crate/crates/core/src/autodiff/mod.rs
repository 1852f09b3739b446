//! Dense tensors with reverse-mode differentiation and Adam.

mod adam;
pub mod check;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState, Parameter};
pub use tape::{ConvPadding, Tape, Var, MASK_VALUE};
pub use tensor::Tensor;
