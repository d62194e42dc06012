//! Numeric core: dense tensors, reverse-mode differentiation, parameter
//! optimization, and the small network blocks built from them.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{clip_grad_norm, global_norm, ParamSet};
pub use tape::{Gradients, Tape, V};
pub use tensor::Tensor;
