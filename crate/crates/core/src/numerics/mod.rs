//! Deterministic numeric substrate: tensors, reverse-mode differentiation,
//! radix-2 FFT, convolution and attention building blocks.

pub mod checkpoint;
pub mod dual;
pub mod fft;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod rng;
mod tensor;

pub use fft::ComplexGrid;
pub use graph::{bce_value, gelu_scalar, Grads, Graph, Unary, Var, BCE_EPS};
pub use rng::Rng;
pub use tensor::Tensor;
