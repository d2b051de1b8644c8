//! Scalar element types.
//!
//! Training runs in `f32`; gradient checking runs the identical graph in
//! `f64`. The trait carries the few math ops the kernels need plus a strided
//! GEMM that dispatches to `matrixmultiply`'s SIMD kernels. Reductions in the
//! engine always accumulate in `f64` regardless of the element type, so the
//! two instantiations differ only by storage rounding.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of tensors: `f32` for training, `f64` for checking.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Default
    + Send
    + Sync
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C ← α·A·B + β·C` with explicit row/column strides per operand.
    ///
    /// Transposition is expressed by swapping an operand's strides, so the
    /// engine never materializes transposed copies. All strides must be
    /// non-negative; operand buffers are bounds-checked before dispatching
    /// into the unsafe BLAS-style kernel.
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
}

/// Largest linear offset touched by an `rows x cols` operand view.
fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    debug_assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }

            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

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
                assert!(max_offset(m, k, rsa, csa) < a.len().max(1), "gemm: A out of bounds");
                assert!(max_offset(k, n, rsb, csb) < b.len().max(1), "gemm: B out of bounds");
                assert!(max_offset(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
                if k == 0 {
                    // Degenerate contraction: C ← β·C.
                    for i in 0..m {
                        for j in 0..n {
                            let idx = i * rsc as usize + j * csc as usize;
                            c[idx] *= beta;
                        }
                    }
                    return;
                }
                unsafe {
                    $gemm(
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
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_row_major() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        let want = gemm_naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_transpose_via_strides() {
        // C = A^T · B expressed by swapping A's strides.
        let (m, k, n) = (2, 3, 2);
        let a_t: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // stored as [k][m]
        let b: Vec<f64> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a_t, 1, m as isize, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        // A = [[1,3,5],[2,4,6]] ; row 0 of C = 1·b0 + 3·b1 + 5·b2 = [6, 8].
        assert_eq!(c, vec![6.0, 8.0, 8.0, 10.0]);
    }

    #[test]
    fn gemm_beta_accumulates() {
        let mut c = vec![1.0f32, 1.0, 1.0, 1.0];
        let a = vec![1.0f32, 0.0, 0.0, 1.0];
        let b = vec![2.0f32, 0.0, 0.0, 2.0];
        f32::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 1.0, &mut c, 2, 1);
        assert_eq!(c, vec![3.0, 1.0, 1.0, 3.0]);
    }
}
