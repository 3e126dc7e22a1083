//! Dense tensors, a reverse-mode gradient tape and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod gru;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gru::GruCell;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
