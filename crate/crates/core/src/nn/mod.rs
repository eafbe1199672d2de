//! Minimal trainable convolutional network kernel.

pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod ops;
pub mod sgd;
pub mod tensor;

pub use layer::LayerSpec;
pub use network::{ActivationTrace, Gradients, LayerParams, Network};
pub use sgd::Sgd;
pub use tensor::Tensor;
