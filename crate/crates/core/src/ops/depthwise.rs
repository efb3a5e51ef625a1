use crate::tensor::{Float, Tensor};

/// A single 3x3 filter shared by every channel.
pub type Kernel3<T> = [[T; 3]; 3];

/// Per-channel cross-correlation with one shared 3x3 kernel: stride 1, zero
/// same-padding, no bias. Channels never mix.
pub fn depthwise3x3<T: Float>(input: &Tensor<T>, kernel: &Kernel3<T>) -> Tensor<T> {
    let s = input.shape();
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    let (h, w) = (s.h, s.w);
    for (src, dst) in input
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
    {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ky, krow) in kernel.iter().enumerate() {
                    let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for (kx, &k) in krow.iter().enumerate() {
                        let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        acc += k.as_f64() * src[iy * w + ix].as_f64();
                    }
                }
                dst[y * w + x] = T::from_f64_lossy(acc);
            }
        }
    }
    out
}

/// Kernel rotated by 180 degrees.
pub fn rotate180<T: Copy>(kernel: &Kernel3<T>) -> Kernel3<T> {
    let mut r = *kernel;
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = kernel[2 - i][2 - j];
        }
    }
    r
}

/// Input gradient of [`depthwise3x3`]: full correlation of the output
/// gradient with the rotated kernel. The kernel itself receives no gradient.
pub fn depthwise3x3_backward<T: Float>(grad_out: &Tensor<T>, kernel: &Kernel3<T>) -> Tensor<T> {
    depthwise3x3(grad_out, &rotate180(kernel))
}
