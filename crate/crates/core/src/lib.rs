//! CPU implementation of an encoder-decoder segmentation network whose skip
//! connections can pass through a fixed 3x3 sharpening filter.
//!
//! The crate is organised bottom-up: [`tensor`] and [`ops`] hold the numeric
//! kernels, [`autograd`] records a forward pass and differentiates it,
//! [`model`] builds the network, [`train`] and [`eval`] run optimisation and
//! scoring, and [`data`] covers synthetic generation and file formats.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, Connection, Model, ModelConfig};
pub use tensor::{ConvWeights, Float, Shape, Tensor};
