//! Dense and transposed 2D convolutions lowered to GEMM via im2col.

use crate::error::{Error, Result};
use crate::tensor::{ConvWeights, Float, Shape, Tensor};

/// Border handling for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output keeps the input's rows and columns.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: Shape, kernel: Shape, stride: usize, padding: Padding) -> Result<Self> {
        if input.c != kernel.c {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {input} has {} channels, kernel {kernel} expects {}",
                input.c, kernel.c
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (kh, kw) = (kernel.h, kernel.w);
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if stride != 1 {
                    return Err(Error::Contract("same padding requires stride 1".into()));
                }
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Contract(format!(
                        "same padding requires an odd kernel, got {kh}x{kw}"
                    )));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => {
                if input.h < kh || input.w < kw {
                    return Err(Error::shape(format!(
                        "valid conv2d: kernel {kh}x{kw} larger than input {input}"
                    )));
                }
                (0, 0)
            }
        };
        let oh = (input.h + 2 * pad_h - kh) / stride + 1;
        let ow = (input.w + 2 * pad_w - kw) / stride + 1;
        Ok(Geometry {
            ci: input.c,
            co: kernel.n,
            h: input.h,
            w: input.w,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad_w {
            0
        } else {
            (self.pad_w - kx).div_ceil(s)
        };
        let hi = if self.w + self.pad_w > kx {
            ((self.w + self.pad_w - kx - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_h)?;
        (y < self.h).then_some(y)
    }
}

/// Lays out every receptive field of `sample` (`ci*h*w`) as a column of
/// `col` (`patch x pixels`).
fn im2col<T: Float>(g: &Geometry, sample: &[T], col: &mut [T]) {
    let px = g.pixels();
    for ci in 0..g.ci {
        let plane = &sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * px..(row + 1) * px];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.input_row(oy, ky) {
                        None => out.fill(T::zero()),
                        Some(y) => {
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            let src = &plane[y * g.w..(y + 1) * g.w];
                            if g.stride == 1 {
                                let x0 = lo + kx - g.pad_w;
                                out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    out[ox] = src[ox * g.stride + kx - g.pad_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Float>(g: &Geometry, col: &[T], sample: &mut [T]) {
    let px = g.pixels();
    for ci in 0..g.ci {
        let plane = &mut sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * px..(row + 1) * px];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    if let Some(y) = g.input_row(oy, ky) {
                        let dst = &mut plane[y * g.w..(y + 1) * g.w];
                        let s = &src[oy * g.ow..(oy + 1) * g.ow];
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad_w] =
                                dst[ox * g.stride + kx - g.pad_w] + s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation plus bias.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weights: &ConvWeights<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let g = Geometry::new(s, weights.kernel.shape(), stride, padding)?;
    if weights.bias.len() != g.co {
        return Err(Error::shape(
            "conv2d bias length differs from output channels",
        ));
    }
    let (k, px) = (g.patch(), g.pixels());
    let mut out = Tensor::zeros([s.n, g.co, g.oh, g.ow]);
    let mut col = vec![T::zero(); k * px];
    let out_len = g.co * px;
    for n in 0..s.n {
        im2col(&g, input.sample(n), &mut col);
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        for (o, row) in dst.chunks_exact_mut(px).enumerate() {
            row.fill(weights.bias[o]);
        }
        T::gemm(
            g.co,
            k,
            px,
            (weights.kernel.data(), k as isize, 1),
            (&col, px as isize, 1),
            T::one(),
            (dst, px as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and its weights.
///
/// The input gradient is the full correlation of `grad_out` with the
/// 180-degree rotated kernels, computed here as `col2im(W^T * dY)`.
pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weights: &ConvWeights<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvWeights<T>)> {
    let s = input.shape();
    let g = Geometry::new(s, weights.kernel.shape(), stride, padding)?;
    let expected = Shape::new(s.n, g.co, g.oh, g.ow);
    grad_out.expect_shape(expected, "conv2d backward grad_out")?;
    let (k, px) = (g.patch(), g.pixels());
    let mut grad_in = Tensor::zeros(s);
    let mut grad_w = weights.zeros_like();
    let mut col = vec![T::zero(); k * px];
    let mut dcol = vec![T::zero(); k * px];
    let in_len = g.ci * g.h * g.w;
    for n in 0..s.n {
        let dy = grad_out.sample(n);
        im2col(&g, input.sample(n), &mut col);
        // dW += dY * col^T
        T::gemm(
            g.co,
            px,
            k,
            (dy, px as isize, 1),
            (&col, 1, px as isize),
            T::one(),
            (grad_w.kernel.data_mut(), k as isize, 1),
        );
        // dcol = W^T * dY
        T::gemm(
            k,
            g.co,
            px,
            (weights.kernel.data(), 1, k as isize),
            (dy, px as isize, 1),
            T::zero(),
            (&mut dcol, px as isize, 1),
        );
        col2im(
            &g,
            &dcol,
            &mut grad_in.data_mut()[n * in_len..(n + 1) * in_len],
        );
        for (o, row) in dy.chunks_exact(px).enumerate() {
            grad_w.bias[o] = grad_w.bias[o] + sum_f64(row);
        }
    }
    Ok((grad_in, grad_w))
}

fn sum_f64<T: Float>(xs: &[T]) -> T {
    T::from_f64_lossy(xs.iter().map(|x| x.as_f64()).sum())
}

fn transposed_dims<T: Float>(input: Shape, weights: &ConvWeights<T>) -> Result<(usize, usize)> {
    let ks = weights.kernel.shape();
    if (ks.h, ks.w) != (2, 2) {
        return Err(Error::shape(format!(
            "transposed conv expects a 2x2 kernel, got {ks}"
        )));
    }
    if input.c != ks.n {
        return Err(Error::shape(format!(
            "transposed conv channel mismatch: input {input} has {} channels, kernel {ks} expects {}",
            input.c, ks.n
        )));
    }
    if weights.bias.len() != ks.c {
        return Err(Error::shape(
            "transposed conv bias length differs from output channels",
        ));
    }
    Ok((ks.n, ks.c))
}

/// 2x2 stride-2 transposed convolution: each input pixel scatters its value
/// times the kernel into a disjoint 2x2 output tile.
pub fn transposed_conv2d<T: Float>(
    input: &Tensor<T>,
    weights: &ConvWeights<T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let (ci, co) = transposed_dims(s, weights)?;
    let hw = s.plane();
    let rows = co * 4;
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros([s.n, co, oh, ow]);
    let mut taps = vec![T::zero(); rows * hw];
    for n in 0..s.n {
        // taps (co*4 x hw) = K^T * x, K viewed as (ci x co*4)
        T::gemm(
            rows,
            ci,
            hw,
            (weights.kernel.data(), 1, rows as isize),
            (input.sample(n), hw as isize, 1),
            T::zero(),
            (&mut taps, hw as isize, 1),
        );
        for o in 0..co {
            let b = weights.bias[o];
            for dy in 0..2 {
                for dx in 0..2 {
                    let tap = &taps[(o * 4 + dy * 2 + dx) * hw..][..hw];
                    for i in 0..s.h {
                        let base = out.offset(n, o, 2 * i + dy, dx);
                        let dst = out.data_mut();
                        for j in 0..s.w {
                            dst[base + 2 * j] = tap[i * s.w + j] + b;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint gather for [`transposed_conv2d`].
pub fn transposed_conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weights: &ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvWeights<T>)> {
    let s = input.shape();
    let (ci, co) = transposed_dims(s, weights)?;
    grad_out.expect_shape(
        Shape::new(s.n, co, 2 * s.h, 2 * s.w),
        "transposed conv backward",
    )?;
    let hw = s.plane();
    let rows = co * 4;
    let mut grad_in = Tensor::zeros(s);
    let mut grad_w = weights.zeros_like();
    let mut gathered = vec![T::zero(); rows * hw];
    let in_len = ci * hw;
    for n in 0..s.n {
        for o in 0..co {
            for dy in 0..2 {
                for dx in 0..2 {
                    let tap = &mut gathered[(o * 4 + dy * 2 + dx) * hw..][..hw];
                    for i in 0..s.h {
                        for j in 0..s.w {
                            tap[i * s.w + j] = grad_out.get(n, o, 2 * i + dy, 2 * j + dx);
                        }
                    }
                }
            }
            grad_w.bias[o] = grad_w.bias[o] + sum_f64(grad_out.plane(n, o));
        }
        // dX (ci x hw) = K (ci x co*4) * G (co*4 x hw)
        T::gemm(
            ci,
            rows,
            hw,
            (weights.kernel.data(), rows as isize, 1),
            (&gathered, hw as isize, 1),
            T::zero(),
            (
                &mut grad_in.data_mut()[n * in_len..(n + 1) * in_len],
                hw as isize,
                1,
            ),
        );
        // dK (ci x co*4) += X (ci x hw) * G^T
        T::gemm(
            ci,
            hw,
            rows,
            (input.sample(n), hw as isize, 1),
            (&gathered, 1, hw as isize),
            T::one(),
            (grad_w.kernel.data_mut(), rows as isize, 1),
        );
    }
    Ok((grad_in, grad_w))
}
