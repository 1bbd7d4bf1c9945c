//! Width- and depth-adaptive transformer classifiers trained by two-stage
//! knowledge distillation, on top of a small reverse-mode autograd engine.

pub mod data;
pub mod distill;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod profile;
pub mod rewiring;

pub use error::{Error, Result};
