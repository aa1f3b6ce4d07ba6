//! AMFC: accelerated image classification by replacing a trained CNN's
//! convolutional forward pass with a chain of per-layer PCA projections.
//!
//! The pipeline: train (or load) a small VGG-style CNN, capture per-layer
//! feature maps for a sample of training images, extract one eigenvector
//! space per layer, then classify new images by projecting them through the
//! chain of spaces and a lightweight head. The `bench` module measures the
//! speedup and accuracy cost of doing so against the full CNN.

// Indexed loops are the natural shape of the numeric kernels here.
#![allow(clippy::needless_range_loop, clippy::manual_is_multiple_of)]

pub mod amfc;
pub mod analysis;
pub mod bench;
pub mod cnn;
pub mod data;
pub mod error;
pub mod featurespace;
pub mod tensor;
pub mod util;

mod linalg;

pub use error::{Error, Result};
