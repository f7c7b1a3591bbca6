use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type a [`Tensor`](super::Tensor) can carry.
///
/// `f32` is the working precision; `f64` exists for finite-difference
/// checks where rounding noise would swamp the comparison.
pub trait Element:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const NAME: &'static str;

    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw GEMM entry point. Callers go through [`gemm`] which checks bounds.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds of the corresponding pointer.
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

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix `(rows, cols, row_stride, col_stride)` view description.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout { rows, cols, rs: cols, cs: 1 }
    }

    /// Layout of the transpose of a row-major `rows × cols` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Layout { rows: cols, cols: rows, rs: 1, cs: cols }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c ← a·b + beta·c`.
pub(crate) fn gemm<T: Element>(a: &[T], la: Layout, b: &[T], lb: Layout, beta: T, c: &mut [T], lc: Layout) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    assert!(la.span() <= a.len() && lb.span() <= b.len() && lc.span() <= c.len());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    // SAFETY: spans were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            T::one(),
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        )
    }
}
