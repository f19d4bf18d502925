//! Cascaded convolutional classifiers with confidence-based early exit.
//!
//! A cascade shares one convolutional trunk between several components.
//! Each component adds a trunk segment and a branch classifier; inference
//! stops at the first classifier whose softmax confidence reaches its
//! threshold. The crate covers the network core, backtrack training,
//! threshold calibration, evaluation, dataset loading and model files.

pub mod calibrate;
pub mod cascade;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod persist;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
