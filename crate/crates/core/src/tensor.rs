//! Dense rank-4 tensors in batch-channel-row-col layout.
//!
//! Element `(i, j, y, x)` of a tensor with dims `(n, c, h, w)` lives at offset
//! `((i * c + j) * h + y) * w + x`. Reductions accumulate sequentially in
//! offset order so results never depend on thread count.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

/// On-disk element type tag, shared with the XTSR format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            2 => Some(Self::U8),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }
}

/// Floating-point element type. Training runs in `f32`; `f64` exists for
/// finite-difference gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Raw GEMM entry point: `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// sizes, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Tensor dimensions `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Element count, or a size error when a dim is zero or the product
    /// overflows `usize`.
    pub fn checked_len(&self) -> Result<usize> {
        ensure!(
            self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1,
            Size,
            "all dims must be >= 1, got {self}"
        );
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .filter(|&v| v <= isize::MAX as usize / 8)
            .ok_or_else(|| Error::Size(format!("{self} exceeds addressable size")))
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Per-example element count `c * h * w`.
    pub fn example(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl From<(usize, usize, usize, usize)> for Dims {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Self::new(n, c, h, w)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T: Scalar = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn fill(dims: impl Into<Dims>, value: T) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    pub fn zeros(dims: impl Into<Dims>) -> Result<Self> {
        Self::fill(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Dims>) -> Result<Self> {
        Self::fill(dims, T::one())
    }

    pub fn from_vec(dims: impl Into<Dims>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        ensure!(
            data.len() == len,
            Shape,
            "buffer of {} elements does not match dims {dims}",
            data.len()
        );
        Ok(Self { dims, data })
    }

    /// Zeros with the same dims as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            data: vec![T::zero(); self.data.len()],
        }
    }

    /// Samples uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform(
        dims: impl Into<Dims>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        ensure!(
            fan_in >= 1 && fan_out >= 1,
            Parameter,
            "fan_in and fan_out must be >= 1"
        );
        let dims = dims.into();
        let len = dims.checked_len()?;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..len)
            .map(|_| T::of(rng.uniform_in(-bound, bound)))
            .collect();
        Ok(Self { dims, data })
    }

    /// Standard-normal entries; used by tests and randomized checks.
    pub fn randn(dims: impl Into<Dims>, rng: &mut Rng) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        let data = (0..len).map(|_| T::of(rng.normal())).collect();
        Ok(Self { dims, data })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(dims: impl Into<Dims>, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        let data = (0..len).map(|_| T::of(rng.uniform_in(lo, hi))).collect();
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let d = self.dims;
        assert!(
            i < d.n && j < d.c && y < d.h && x < d.w,
            "index ({i}, {j}, {y}, {x}) out of bounds for {d}"
        );
        ((i * d.c + j) * d.h + y) * d.w + x
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.offset(i, j, y, x)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, y: usize, x: usize, v: T) {
        let o = self.offset(i, j, y, x);
        self.data[o] = v;
    }

    /// The `h * w` plane of example `i`, channel `j`.
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (i * self.dims.c + j) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (i * self.dims.c + j) * p;
        &mut self.data[start..start + p]
    }

    /// The `c * h * w` slab of example `i`.
    pub fn example(&self, i: usize) -> &[T] {
        let e = self.dims.example();
        &self.data[i * e..(i + 1) * e]
    }

    pub fn reshape(self, dims: impl Into<Dims>) -> Result<Self> {
        let dims = dims.into();
        ensure!(
            dims.checked_len()? == self.data.len(),
            Shape,
            "cannot reshape {} into {dims}",
            self.dims
        );
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same(&self, other: &Self, op: &str) -> Result<()> {
        ensure!(
            self.dims == other.dims,
            Shape,
            "{op}: {} vs {}",
            self.dims,
            other.dims
        );
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, "zip_map")?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul_scalar(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    pub fn elu(&self) -> Self {
        self.map(elu)
    }

    /// Sequential sum in offset order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Per-example index of the largest entry of the `c * h * w` slab; for
    /// logits shaped `(n, classes, 1, 1)` this is the argmax over classes.
    /// Ties go to the lower index.
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.dims.n)
            .map(|i| {
                let row = self.example(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Channels `start..start + count` of every example.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let d = self.dims;
        ensure!(
            count >= 1 && start + count <= d.c,
            Shape,
            "channel slice {start}..{} out of range for {d}",
            start + count
        );
        let p = d.plane();
        let mut data = Vec::with_capacity(d.n * count * p);
        for i in 0..d.n {
            let base = (i * d.c + start) * p;
            data.extend_from_slice(&self.data[base..base + count * p]);
        }
        Ok(Self {
            dims: d.with_c(count),
            data,
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), Shape, "nothing to concatenate");
        let first = parts[0].dims;
        for p in parts {
            ensure!(
                p.dims.n == first.n && p.dims.h == first.h && p.dims.w == first.w,
                Shape,
                "concat: {} vs {}",
                p.dims,
                first
            );
        }
        let c: usize = parts.iter().map(|p| p.dims.c).sum();
        let dims = first.with_c(c);
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.example(i));
            }
        }
        Ok(Self { dims, data })
    }

    /// Gathers the listed examples into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        ensure!(!indices.is_empty(), Shape, "empty gather");
        let mut data = Vec::with_capacity(indices.len() * self.dims.example());
        for &i in indices {
            ensure!(i < self.dims.n, Shape, "example {i} out of range");
            data.extend_from_slice(self.example(i));
        }
        Ok(Self {
            dims: self.dims.with_n(indices.len()),
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    // NaN propagates.
    if x <= T::zero() {
        T::zero()
    } else {
        x
    }
}

/// ELU with `alpha = 1`.
#[inline]
pub fn elu<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        x.exp_m1()
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_and_count() {
        let z = Tensor4::<f32>::zeros((1, 1, 2, 2)).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 4]);
        let f = Tensor4::<f32>::fill((1, 2, 1, 1), 3.5).unwrap();
        assert_eq!(f.as_slice(), &[3.5, 3.5]);
        assert_eq!(Tensor4::<f32>::ones((2, 3, 4, 5)).unwrap().sum(), 120.0);
    }

    #[test]
    fn zero_dim_and_overflow_are_size_errors() {
        assert!(matches!(
            Tensor4::<f32>::zeros((0, 1, 1, 1)),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            Tensor4::<f32>::zeros((usize::MAX / 2, 4, 4, 4)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn offset_layout() {
        let t = Tensor4::<f32>::zeros((2, 3, 4, 5)).unwrap();
        assert_eq!(t.offset(1, 2, 3, 4), ((3 + 2) * 4 + 3) * 5 + 4);
        assert_eq!(t.offset(1, 2, 3, 4), t.len() - 1);
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-2.0f64), 0.0);
        assert_eq!(relu(3.0f64), 3.0);
        assert_eq!(elu(0.0f64), 0.0);
        assert!((elu(-1.0f64) - (-0.632_120_558_828_557_7)).abs() < 1e-12);
        assert!((elu(-60.0f64) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn add_negation_is_zero() {
        let mut rng = Rng::seed(1);
        let t = Tensor4::<f32>::randn((2, 3, 4, 4), &mut rng).unwrap();
        let s = t.add(&t.mul_scalar(-1.0)).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor4::<f32>::zeros((1, 2, 2, 2)).unwrap();
        let b = Tensor4::<f32>::zeros((1, 2, 2, 3)).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn glorot_bound_and_determinism() {
        let a = Tensor4::<f32>::glorot_uniform((4, 3, 3, 3), 3, 3, &mut Rng::seed(5)).unwrap();
        assert!(a.as_slice().iter().all(|v| v.abs() <= 1.0));
        let b = Tensor4::<f32>::glorot_uniform((4, 3, 3, 3), 3, 3, &mut Rng::seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn channel_slice_concat_inverse() {
        let mut rng = Rng::seed(2);
        let t = Tensor4::<f64>::randn((2, 5, 3, 3), &mut rng).unwrap();
        let a = t.slice_channels(0, 2).unwrap();
        let b = t.slice_channels(2, 3).unwrap();
        assert_eq!(Tensor4::concat_channels(&[&a, &b]).unwrap(), t);
    }

    #[test]
    fn argmax_ties_low_index() {
        let t = Tensor4::<f32>::from_vec((2, 3, 1, 1), vec![1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.argmax_classes(), vec![1, 0]);
    }
}
