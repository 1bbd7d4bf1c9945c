//! Dense `f64` tensors, a reverse-mode tape, losses and the optimizer.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, ParamAccess, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
