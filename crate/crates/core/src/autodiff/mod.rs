//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles;
//! [`Tape::backward`] then walks the record once in reverse to produce
//! gradients for every trainable leaf. All arithmetic is `f64`.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, OpKind, Tape, Var, MIN_NORM};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
#[cfg(test)]
pub(crate) use tape::sigmoid;
