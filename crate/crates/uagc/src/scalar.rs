//! Floating-point abstraction for the numeric core.
//!
//! Tensors, sparse matrices and the differentiation tape are generic over
//! [`Scalar`] so the same kernels serve f64 (training, where finite-difference
//! checks need the headroom) and f32 (checkpoint storage). Concrete aliases
//! for the default precision live at the crate root.

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// f32 or f64, plus the platform gemm kernel for that width.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64, for literals and defaults.
    fn from_f64(x: f64) -> Self;

    /// Lossy widening to f64, for reporting and serialization.
    fn to_f64(self) -> f64;

    /// `c = a · b (+ c if accumulate)` on row-major buffers.
    ///
    /// `trans_a`/`trans_b` reinterpret the corresponding buffer as the
    /// transpose of its row-major layout, so `a` holds `k*m` values when
    /// `trans_a` is set. Buffer lengths must match the logical `m×k`,
    /// `k×n`, `m×n` shapes.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        accumulate: bool,
        c: &mut [Self],
    );
}

macro_rules! strides {
    ($rows:expr, $cols:expr, $trans:expr) => {
        if $trans {
            // Stored as cols×rows row-major; element (i, j) of the logical
            // matrix sits at j*rows + i.
            (1isize, $rows as isize)
        } else {
            ($cols as isize, 1isize)
        }
    };
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        accumulate: bool,
        c: &mut [Self],
    ) {
        assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
        assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
        assert_eq!(c.len(), m * n, "gemm: out buffer size");
        let (rsa, csa) = strides!(m, k, trans_a);
        let (rsb, csb) = strides!(k, n, trans_b);
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::dgemm(
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

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        accumulate: bool,
        c: &mut [Self],
    ) {
        assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
        assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
        assert_eq!(c.len(), m * n, "gemm: out buffer size");
        let (rsa, csa) = strides!(m, k, trans_a);
        let (rsb, csb) = strides!(k, n, trans_b);
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::sgemm(
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
