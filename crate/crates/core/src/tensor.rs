//! Dense row-major tensors and the scalar trait the network code is generic over.
//!
//! Training runs in `f32`; gradient checks run the same code paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices with
    /// `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // op(x) is rows x cols; when transposed the storage is cols x rows.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: the length checks above guarantee every strided
                // access stays inside the slices.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `(batch, channels, height, width)`; panics on tensors that are not rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-axis entry.
    pub fn sample_len(&self) -> usize {
        if self.shape.is_empty() {
            return 0;
        }
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        if n != nb || h != hb || w != wb {
            return Err(Error::shape(format!(
                "channel concat of {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Self {
            shape: vec![n, ca + cb, h, w],
            data,
        })
    }

    /// Splits an NCHW tensor into its first `c0` channels and the rest.
    pub fn split_channels(&self, c0: usize) -> (Self, Self) {
        let (n, c, h, w) = self.dims4();
        assert!(c0 <= c);
        let plane = h * w;
        let mut a = Vec::with_capacity(n * c0 * plane);
        let mut b = Vec::with_capacity(n * (c - c0) * plane);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..c0 * plane]);
            b.extend_from_slice(&s[c0 * plane..]);
        }
        (
            Self {
                shape: vec![n, c0, h, w],
                data: a,
            },
            Self {
                shape: vec![n, c - c0, h, w],
                data: b,
            },
        )
    }

    /// Stacks equally shaped samples along a new leading axis.
    pub fn stack(samples: &[&[T]], sample_shape: &[usize]) -> Result<Self> {
        let len: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(samples.len() * len);
        for s in samples {
            if s.len() != len {
                return Err(Error::shape(format!(
                    "stack: sample of {} elements, expected {len}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Self { shape, data })
    }

    /// Selects leading-axis entries in the given order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }
}
