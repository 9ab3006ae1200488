//! Minimal tape-based autodiff and layers for the denoiser and codec.

mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use layers::{Conv2d, Linear, ResBlock};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
