//! Dense tensors, reverse-mode differentiation, parameter storage.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{ModelParams, ParamEntry, Partition};
pub use tape::{Gradients, Graph, Var};
pub use tensor::{same_out_len, Conv2dGeometry, Real, Tensor};
