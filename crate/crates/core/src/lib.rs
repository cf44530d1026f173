//! Principal component networks.
//!
//! Trains small dense, convolutional and residual networks, measures the
//! effective dimensionality of hidden activations with PCA, rewrites trained
//! layers in the high-variance PCA basis of their inputs (and prunes outputs
//! the next layer's basis barely uses), then keeps training the smaller
//! network.

pub mod data;
pub mod error;
pub mod nn;
pub mod pca;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
