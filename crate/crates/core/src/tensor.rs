//! Dense rank-4 tensors and convolution geometry.
//!
//! Activations are stored NHWC (`[batch, height, width, channels]`) and
//! filter banks KKIO (`[kernel_h, kernel_w, in_channels, out_channels]`),
//! both row-major. A KKIO bank therefore doubles as a `(K·K·Ci) × Co`
//! matrix without any copy, and an NHWC activation as an `(N·H·W) × C`
//! matrix; the convolution and channel-mixing kernels rely on this.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AlfError, Result};

/// Floating-point element type. `f32` for storage and training, `f64` for
/// gradient checks and oracles.
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    /// `[batch, height, width, channels]`
    Nhwc,
    /// `[kernel, kernel, in_channels, out_channels]`
    Kkio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
    layout: Layout,
}

impl<T: Real> Tensor4<T> {
    pub fn from_vec(dims: [usize; 4], data: Vec<T>, layout: Layout) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(AlfError::shape(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data, layout })
    }

    pub fn zeros(dims: [usize; 4], layout: Layout) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
            layout,
        }
    }

    pub fn filled(dims: [usize; 4], value: T, layout: Layout) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
            layout,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
            layout: Layout::Nhwc,
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: [usize; 4], std: f64, layout: Layout, rng: &mut R) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self { dims, data, layout }
    }

    /// I.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 4], lo: f64, hi: f64, layout: Layout, rng: &mut R) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Self { dims, data, layout }
    }

    /// `1×1×n×n` identity, the neutral element of channel mixing.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([1, 1, n, n], Layout::Kkio);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn layout(&self) -> Layout {
        self.layout
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing (channel) axis.
    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    /// Product of the three leading axes: the row count when the tensor is
    /// viewed as a matrix over its channel axis.
    #[inline]
    pub fn rows(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn offset(&self, i: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((i[0] * d1 + i[1]) * d2 + i[2]) * d3 + i[3]
    }

    #[inline]
    pub fn get(&self, i: [usize; 4]) -> T {
        self.data[self.offset(i)]
    }

    #[inline]
    pub fn set(&mut self, i: [usize; 4], v: T) {
        let o = self.offset(i);
        self.data[o] = v;
    }

    pub fn reshape(&self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone(), self.layout)
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            layout: self.layout,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(AlfError::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            layout: self.layout,
        })
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            layout: self.layout,
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(AlfError::NonFinite(op))
        }
    }

    /// Copies the listed channels (trailing axis) in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> Result<Self> {
        let c = self.channels();
        if let Some(&bad) = keep.iter().find(|&&k| k >= c) {
            return Err(AlfError::shape(format!("channel {bad} out of range for {c} channels")));
        }
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * keep.len());
        for r in 0..rows {
            let row = &self.data[r * c..(r + 1) * c];
            data.extend(keep.iter().map(|&k| row[k]));
        }
        let [d0, d1, d2, _] = self.dims;
        Self::from_vec([d0, d1, d2, keep.len()], data, self.layout)
    }

    /// Copies the listed rows of a `1×1×R×C` matrix in the given order.
    pub fn select_matrix_rows(&self, keep: &[usize]) -> Result<Self> {
        let [a, b, r, c] = self.dims;
        if a != 1 || b != 1 {
            return Err(AlfError::shape(format!("expected a 1×1×R×C matrix, got {:?}", self.dims)));
        }
        if let Some(&bad) = keep.iter().find(|&&k| k >= r) {
            return Err(AlfError::shape(format!("row {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(keep.len() * c);
        for &k in keep {
            data.extend_from_slice(&self.data[k * c..(k + 1) * c]);
        }
        Self::from_vec([1, 1, keep.len(), c], data, self.layout)
    }

    /// Euclidean norm of each channel (trailing-axis slice), accumulated in f64.
    pub fn channel_norms(&self) -> Vec<f64> {
        let c = self.channels();
        let mut acc = vec![0.0f64; c];
        for row in self.data.chunks_exact(c.max(1)) {
            for (a, &v) in acc.iter_mut().zip(row) {
                a.add_assign(v.as_f64() * v.as_f64());
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    /// Matrix transpose of a `1×1×R×C` tensor.
    pub fn transpose_matrix(&self) -> Result<Self> {
        let [a, b, r, c] = self.dims;
        if a != 1 || b != 1 {
            return Err(AlfError::shape(format!("expected a 1×1×R×C matrix, got {:?}", self.dims)));
        }
        let mut out = Self::zeros([1, 1, c, r], self.layout);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }
}

/// Kernel size, stride and symmetric zero padding of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(AlfError::Geometry(format!(
                "kernel ({kernel}) and stride ({stride}) must be positive"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// 1×1, stride 1, no padding.
    pub fn pointwise() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: 0,
        }
    }

    /// Output extent along one spatial axis. Fails unless the stride divides
    /// the padded span exactly.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 {
            return Err(AlfError::Geometry("kernel and stride must be positive".into()));
        }
        if padded < self.kernel {
            return Err(AlfError::Geometry(format!(
                "kernel {} larger than padded input {padded}",
                self.kernel
            )));
        }
        let span = padded - self.kernel;
        if span % self.stride != 0 {
            return Err(AlfError::Geometry(format!(
                "stride {} does not divide padded span {span} (input {input}, kernel {}, padding {})",
                self.stride, self.kernel, self.padding
            )));
        }
        Ok(span / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.output_extent(h)?, self.output_extent(w)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply_scalar<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = AlfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(AlfError::Config(format!("unknown activation `{other}`"))),
        }
    }
}
