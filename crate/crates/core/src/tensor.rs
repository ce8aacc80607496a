//! Dense row-major tensors over `f32` or `f64`.

use std::fmt;
use std::iter::Sum;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold. Training runs in `f32`; gradient
/// checks run in `f64`.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Default + Send + Sync + Sum + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "gemm: negative strides unsupported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm: operand of len {len} too short for {rows}x{cols}");
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_extent(a.len(), m, k, a_strides);
                check_gemm_extent(b.len(), k, n, b_strides);
                check_gemm_extent(c.len(), m, n, c_strides);
                // SAFETY: every index reachable through the given dimensions
                // and strides was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}
impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..SHOW])
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(op, format!("expected rank-4 NCHW, got {:?}", self.shape))),
        }
    }

    /// `(N, D)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(Error::invalid(op, format!("expected rank-2, got {:?}", self.shape))),
        }
    }

    /// NaN/Inf check.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(op, other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(op, expected, &self.shape));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            t.expect_shape("stack", first.shape())?;
            data.extend_from_slice(t.data());
        }
        Tensor::new(&shape, data)
    }

    /// Item `i` along the leading axis.
    pub fn index_outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Rows `idx` along the leading axis, in order.
    pub fn select_outer(&self, idx: &[usize]) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(inner * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn nan_is_detectable() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.is_finite());
        t.data_mut()[2] = f32::NAN;
        assert!(!t.is_finite());
    }

    #[test]
    fn gemm_handles_transposed_strides() {
        // a is 2x3 row-major; compute aᵀ·a (3x3) by reading a with swapped strides.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0f64; 9];
        f64::gemm(3, 2, 3, 1.0, &a, (1, 3), &a, (3, 1), 0.0, &mut c, (3, 1));
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn stack_and_select_roundtrip() {
        let a = Tensor::<f32>::from_fn(&[2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 2], |i| 10.0 + i as f32);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index_outer(1), b);
        assert_eq!(s.select_outer(&[1, 0]).index_outer(1), a);
    }
}
