//! Dense row-major tensors over `f32` (training) or `f64` (verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float as NumFloat;
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Float:
    NumFloat
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Archive dtype code.
    const DTYPE: u8;

    /// Conversion from a 64-bit literal.
    fn c(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    const DTYPE: u8 = 0;
    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const DTYPE: u8 = 1;
    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense N-dimensional array.
///
/// `product(shape) == data.len()` always holds; a scalar is stored with
/// shape `[1]`. `grad`, when present, has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    /// Internal constructor for callers that already validated the extents.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::c(rng.random_range(lo..hi)))
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::c(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Last-axis extent.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let [r, c] = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }
}

/// `[M,K] x [K,N]` into a fresh buffer, fixed i-k-j accumulation order.
pub(crate) fn matmul_raw<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [K,M]`, `b: [K,N]`.
pub(crate) fn matmul_tn<T: Float>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [M,K]`, `b: [N,K]`.
pub(crate) fn matmul_nt<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}
