//! Extract-edit unsupervised machine translation at desk scale.

pub mod engine;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod model;
pub mod scalar;
pub mod text;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type of the whole pipeline.
pub type Real = f64;

pub type Tensor = kernel::Tensor<Real>;
pub type Tape = kernel::Tape<Real>;
pub type ParamStore = kernel::ParamStore<Real>;
pub type AdamState = kernel::AdamState<Real>;
