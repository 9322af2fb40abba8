//! Dense row-major matrices over `f32`/`f64` and the GEMM kernel shared by the
//! forward-only evaluator and the autodiff tape.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type usable for network evaluation and differentiation.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` over raw strided buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite cast")
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
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass buffers whose lengths cover the strided
                // extents; `Tensor::gemm_into` checks this before dispatch.
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
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// `out = alpha * op(a)·op(b) + beta * out`, where `op` optionally transposes.
    pub fn gemm_into(
        alpha: T,
        a: &Tensor<T>,
        trans_a: bool,
        b: &Tensor<T>,
        trans_b: bool,
        beta: T,
        out: &mut Tensor<T>,
    ) {
        let (m, k, rsa, csa) = if trans_a {
            (a.cols, a.rows, 1, a.cols as isize)
        } else {
            (a.rows, a.cols, a.cols as isize, 1)
        };
        let (kb, n, rsb, csb) = if trans_b {
            (b.cols, b.rows, 1, b.cols as isize)
        } else {
            (b.rows, b.cols, b.cols as isize, 1)
        };
        assert_eq!(k, kb, "gemm inner dimension");
        assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");
        T::gemm(
            m,
            k,
            n,
            alpha,
            &a.data,
            rsa,
            csa,
            &b.data,
            rsb,
            csb,
            beta,
            &mut out.data,
            out.cols as isize,
            1,
        );
    }

    pub fn matmul(&self, b: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::zeros(self.rows, b.cols);
        Tensor::gemm_into(T::one(), self, false, b, false, T::zero(), &mut out);
        out
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow for large x.
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
