use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of a [`Tensor`](super::Tensor).
///
/// Precision is chosen at construction: `f64` for gradient checks, `f32` for
/// training runs.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn lit(v: f64) -> Self;

    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
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

macro_rules! check_extent {
    ($buf:expr, $rows:expr, $cols:expr, $strides:expr) => {
        if $rows > 0 && $cols > 0 {
            let last = ($rows as isize - 1) * $strides.0 + ($cols as isize - 1) * $strides.1;
            assert!(
                last >= 0 && (last as usize) < $buf.len(),
                "gemm operand out of bounds"
            );
        }
    };
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (isize, isize),
    ) {
        check_extent!(a, m, k, (rsa, csa));
        check_extent!(b, k, n, (rsb, csb));
        check_extent!(c, m, n, (rsc, csc));
        // SAFETY: every operand was bounds-checked against its strides above.
        unsafe {
            matrixmultiply::sgemm(
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
            );
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (isize, isize),
    ) {
        check_extent!(a, m, k, (rsa, csa));
        check_extent!(b, k, n, (rsb, csb));
        check_extent!(c, m, n, (rsc, csc));
        // SAFETY: every operand was bounds-checked against its strides above.
        unsafe {
            matrixmultiply::dgemm(
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
            );
        }
    }
}
