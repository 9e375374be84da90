//! Standard layers: convolution, batch normalisation, activations, pooling,
//! fully connected layers and softmax cross-entropy, each with a forward and
//! an explicit backward rule.

pub mod conv;
pub mod norm;
pub mod ops;

pub use conv::{conv2d, conv2d_backward, conv2d_direct, conv2d_per_sample, Conv2dLayer, ConvGeom, ConvGrads};
pub use norm::BatchNormLayer;

/// Train mode uses batch statistics in batch normalisation; eval mode uses
/// the running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
