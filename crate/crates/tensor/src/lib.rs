//! Dense tensors with tape-based reverse-mode autodiff, sized for CPU-scale
//! convolutional models. Generic over `f32` (training) and `f64` (gradient
//! oracles).

pub mod graph;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
