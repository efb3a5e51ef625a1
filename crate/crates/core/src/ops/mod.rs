//! Forward and backward kernels for every layer primitive in the network.
//!
//! All functions are pure: inputs are borrowed immutably and a fresh tensor is
//! returned.

mod activation;
mod conv;
mod depthwise;
mod pool;

pub use activation::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, slice_channels,
    softmax_channels, softmax_channels_backward,
};
pub(crate) use activation::{sigmoid_scalar, unslice_channels};
pub use conv::{conv2d, conv2d_backward, transposed_conv2d, transposed_conv2d_backward, Padding};
pub use depthwise::{depthwise3x3, depthwise3x3_backward, rotate180, Kernel3};
pub use pool::{maxpool2x2, maxpool2x2_backward, ArgIndices};
