//! Dense NCHW tensors and the scalar types they can hold.
//!
//! Production code runs on `f32`. Every kernel is generic over [`Float`] so
//! that gradient checks can replay the exact same code path in `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::{FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `C <- alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// Slices are bounds-checked against the extents implied by the strides
    /// before the call is forwarded to the blocked kernel.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                assert!(a.0.len() >= extent(m, k, a.1, a.2), "gemm: A too short");
                assert!(b.0.len() >= extent(k, n, b.1, b.2), "gemm: B too short");
                assert!(c.0.len() >= extent(m, n, c.1, c.2), "gemm: C too short");
                // SAFETY: extents checked above; C does not alias A or B
                // because it is borrowed mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Extents of a rank-4 tensor in `(batch, channels, rows, cols)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::shape(format!(
                "all dimensions must be >= 1, got {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense rank-4 array stored contiguously in row-major NCHW order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        shape.validate().expect("tensor dimensions must be >= 1");
        Tensor {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    /// Scalar stored as a `1x1x1x1` tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        shape.validate().expect("tensor dimensions must be >= 1");
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `h*w` plane of one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    /// Contiguous `c*h*w` block of one sample.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    /// `<self, other>` accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type, e.g. to build an `f64` shadow of an `f32` tensor.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    /// Batch-dimension slice `[start, start+len)`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.n {
            return Err(Error::shape(format!(
                "batch slice {start}..{} out of range for {}",
                start + len,
                self.shape
            )));
        }
        let per = self.shape.c * self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(len, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }

    /// Stacks tensors of equal `(c, h, w)` along the batch axis.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in parts {
            let ts = t.shape;
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(format!("cannot stack {ts} onto {s}")));
            }
            n += ts.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }

    pub(crate) fn expect_shape(&self, other: Shape, what: &str) -> Result<()> {
        if self.shape != other {
            return Err(Error::shape(format!(
                "{what}: shapes {} and {other} differ",
                self.shape
            )));
        }
        Ok(())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Learnable filters of one convolution layer.
///
/// For a regular convolution the kernel is `(out_ch, in_ch, kh, kw)`; for a
/// transposed convolution it is `(in_ch, out_ch, kh, kw)`. The bias always
/// has one entry per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Float> ConvWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        if kernel.shape().n != bias.len() {
            return Err(Error::shape(format!(
                "kernel {} has {} output channels but bias has {}",
                kernel.shape(),
                kernel.shape().n,
                bias.len()
            )));
        }
        Ok(ConvWeights { kernel, bias })
    }

    pub fn new_transposed(kernel: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        if kernel.shape().c != bias.len() {
            return Err(Error::shape(format!(
                "transposed kernel {} has {} output channels but bias has {}",
                kernel.shape(),
                kernel.shape().c,
                bias.len()
            )));
        }
        Ok(ConvWeights { kernel, bias })
    }

    pub fn zeros_like(&self) -> Self {
        ConvWeights {
            kernel: Tensor::zeros(self.kernel.shape()),
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    pub fn numel(&self) -> usize {
        self.kernel.numel() + self.bias.len()
    }

    pub fn cast<U: Float>(&self) -> ConvWeights<U> {
        ConvWeights {
            kernel: self.kernel.cast(),
            bias: self
                .bias
                .iter()
                .map(|b| U::from_f64_lossy(b.as_f64()))
                .collect(),
        }
    }
}
