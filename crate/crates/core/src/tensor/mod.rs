//! Dense row-major tensors and a recorded-tape reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]; differentiable computation happens on a
//! [`Graph`], which records every operation so [`Graph::backward`] can replay
//! them in reverse. Trainable weights are held in a [`ParamStore`] and bound
//! into a graph as leaves at the start of each forward pass.

mod gradcheck;
mod graph;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamError};
pub(crate) use graph::splitmix;
pub use graph::{DropoutStream, Graph, Mask, Mode, Var};
pub use params::{ParamId, ParamStore, Parameter};

/// Floating-point element type. `f64` is used for gradient checks and tests,
/// `f32` for training and inference.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Additive logit used for masked attention columns.
    const MASK_LOGIT: Self;

    /// `c = op(a) * op(b) + beta * c`, where `op(a)` is `m x k`, `op(b)` is
    /// `k x n` and `c` is row-major `m x n`. `ta`/`tb` mean the stored
    /// operand is the transpose of `op(.)`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // element (i, j) of the logical rows x cols operand
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $mask:expr) => {
        impl Real for $t {
            const MASK_LOGIT: Self = $mask;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                // SAFETY: the slices were checked to cover every index the
                // strides address, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, -1e9);
impl_real!(f64, matrixmultiply::dgemm, -1e9);

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    /// Builds an `r x c` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Input("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    /// Convenience for tests and fixtures written as `f64` literals.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64_lossy()))
                .collect(),
        }
    }

    /// Plain (non-recorded) matrix product, used by inference helpers and tests.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            T::zero(),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_transpose_flags() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn plain_matmul_hand_case() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert!(b.matmul(&b).is_err());
    }
}
