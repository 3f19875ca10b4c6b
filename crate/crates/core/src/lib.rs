//! Selective Transformer for hyperspectral image classification.
//!
//! The crate is organised bottom-up: [`tensor`] holds the dense `f64` kernels
//! and their hand-written gradients, [`ksa`] and [`tsa`] the two attention
//! blocks, [`model`] the assembled classifier, and [`data`], [`train`] and
//! [`metrics`] the pipeline around it.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ffn;
pub mod ksa;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod tsa;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
