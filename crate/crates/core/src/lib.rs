//! Mediated mixture of experts for convolutional classifiers.
//!
//! Per-superclass experts share a frozen convolutional prefix, report
//! self-confidence through small heads at an intermediate layer, and stop
//! early when a rival is confident enough; a slim full-class mediator
//! arbitrates whenever more than one expert survives.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod builder;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod gating;
pub mod io;
pub mod nn;
pub mod partition;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type Ensemble32 = ensemble::Ensemble<f32>;
pub type Ensemble64 = ensemble::Ensemble<f64>;
pub type Dataset32 = partition::LabeledDataset<f32>;
pub type Dataset64 = partition::LabeledDataset<f64>;
