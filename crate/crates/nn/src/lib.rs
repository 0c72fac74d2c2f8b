//! A compact CPU tensor engine with tape-based reverse-mode differentiation.
//!
//! Activations use a channel-major `[C, N, H, W]` layout so that every
//! convolution and 1×1 projection over a whole batch is a single GEMM.
//! All kernels are single threaded and run in a fixed order, so results are
//! bit-reproducible for identical inputs.

mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
