//! Dense tensors, reverse-mode differentiation, Adam and small MLPs.

mod adam;
pub mod nn;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use nn::{Activation, BoundMlp, Dense, Mlp};
pub use tape::{lse_and_softmax, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
