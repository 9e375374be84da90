//! Convolutional engine built around cross-layer kernel sharing.
//!
//! Full ("parent") convolution kernels are owned by one stage of a residual
//! network and reused by weight-free "child" layers. Each child specialises
//! the shared kernel through a small adapter: an input-dependent channel
//! attention plus static filter and spatial attention tensors that can be
//! folded into the kernel ahead of inference.

pub mod analysis;
pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kerneldna;
pub mod linalg;
pub mod memtrack;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::Mode;
pub use params::{ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
