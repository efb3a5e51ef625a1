//! The fixed Laplacian sharpening filter and the skip-path block built on it.

use crate::ops::{depthwise3x3, Kernel3};
use crate::tensor::{Float, Tensor};

/// The 8-neighbour Laplacian high-pass kernel.
///
/// Elements sum to zero and the kernel is point symmetric, so correlation
/// and convolution coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharpKernel;

impl SharpKernel {
    pub const VALUES: [[i8; 3]; 3] = [[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]];

    pub fn weights<T: Float>() -> Kernel3<T> {
        Self::VALUES.map(|row| row.map(|v| T::from_f64_lossy(v as f64)))
    }
}

/// Depthwise sharpening of an encoder feature map. Output shape equals input
/// shape and the block owns no learnable parameters.
pub fn sharp_block<T: Float>(enc: &Tensor<T>) -> Tensor<T> {
    depthwise3x3(enc, &SharpKernel::weights())
}

/// How [`sharpen_image`] combines the filter response with the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharpenMode {
    /// `K * I`
    Laplacian,
    /// `I + K * I`
    Additive,
}

/// Applies the sharpening kernel to an image and clamps the result to
/// `[0, 1]`.
pub fn sharpen_image<T: Float>(image: &Tensor<T>, mode: SharpenMode) -> Tensor<T> {
    let response = sharp_block(image);
    let clamp = |v: T| v.max(T::zero()).min(T::one());
    match mode {
        SharpenMode::Laplacian => response.map(clamp),
        SharpenMode::Additive => image
            .zip_map(&response, |i, k| clamp(i + k))
            .expect("response has the image shape"),
    }
}
