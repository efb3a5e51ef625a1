use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

pub fn relu<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Float>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Float>(x: T) -> T {
    // split on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Backward of sigmoid from its saved output `y`.
pub fn sigmoid_backward<T: Float>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |y, g| g * y * (T::one() - y))
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub fn softmax_channels<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    let mut exps = vec![0.0f64; s.c];
    for n in 0..s.n {
        let src = input.sample(n);
        let base = n * s.c * plane;
        for p in 0..plane {
            let max = (0..s.c)
                .map(|c| src[c * plane + p].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, e) in exps.iter_mut().enumerate() {
                *e = (src[c * plane + p].as_f64() - max).exp();
                total += *e;
            }
            let dst = out.data_mut();
            for (c, e) in exps.iter().enumerate() {
                dst[base + c * plane + p] = T::from_f64_lossy(e / total);
            }
        }
    }
    out
}

/// Backward of softmax from its saved output `y`: `y * (g - sum_c y*g)`.
pub fn softmax_channels_backward<T: Float>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    output.expect_shape(grad_out.shape(), "softmax backward")?;
    let s = output.shape();
    let plane = s.plane();
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        let y = output.sample(n);
        let g = grad_out.sample(n);
        let base = n * s.c * plane;
        for p in 0..plane {
            let inner: f64 = (0..s.c)
                .map(|c| y[c * plane + p].as_f64() * g[c * plane + p].as_f64())
                .sum();
            let dst = grad.data_mut();
            for c in 0..s.c {
                let i = c * plane + p;
                dst[base + i] = T::from_f64_lossy(y[i].as_f64() * (g[i].as_f64() - inner));
            }
        }
    }
    Ok(grad)
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape(format!(
            "concat_channels needs matching batch and spatial extents, got {sa} and {sb}"
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec([sa.n, sa.c + sb.c, sa.h, sa.w], data)
}

/// Channels `[start, start+len)`.
pub fn slice_channels<T: Float>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        data.extend_from_slice(&input.sample(n)[start * plane..(start + len) * plane]);
    }
    Tensor::from_vec([s.n, len, s.h, s.w], data)
}

/// Adjoint of [`slice_channels`]: embeds `grad` into zeros of `full` shape.
pub(crate) fn unslice_channels<T: Float>(full: Shape, start: usize, grad: &Tensor<T>) -> Tensor<T> {
    let gs = grad.shape();
    let plane = full.plane();
    let mut out = Tensor::zeros(full);
    for n in 0..full.n {
        let off = (n * full.c + start) * plane;
        out.data_mut()[off..off + gs.c * plane].copy_from_slice(grad.sample(n));
    }
    out
}
