//! Dense tensors, a reverse-mode autodiff tape, and Adam.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{sigmoid, Graph, Var};
pub use params::{tensor_digest, ParamSet};
pub(crate) use params::hex_digest;
pub use tensor::Tensor;

pub mod gradcheck;
