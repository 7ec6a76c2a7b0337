//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` for training, `f64` for gradient checking.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in reports ("f32" / "f64").
    const NAME: &'static str;

    /// Converts an `f64` literal; exact for `f64`, rounded for `f32`.
    fn lit(v: f64) -> Self;

    /// General matrix multiply `c = alpha * a·b + beta * c` on strided row/column layouts.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand too short: need {} elements, have {len}", last + 1);
}

fn dot<T: Float>(x: &[T], xs: usize, y: &[T], ys: usize, len: usize) -> T {
    if xs == 1 && ys == 1 {
        x[..len].iter().zip(&y[..len]).fold(T::zero(), |s, (&a, &b)| s + a * b)
    } else {
        (0..len).fold(T::zero(), |s, p| s + x[p * xs] * y[p * ys])
    }
}

fn axpy<T: Float>(alpha: T, x: &[T], xs: usize, y: &mut [T], ys: usize, len: usize) {
    if xs == 1 && ys == 1 {
        y[..len].iter_mut().zip(&x[..len]).for_each(|(d, &v)| *d = *d + alpha * v);
    } else {
        (0..len).for_each(|p| y[p * ys] = y[p * ys] + alpha * x[p * xs]);
    }
}

fn scale_c<T: Float>(beta: T, c: &mut [T], rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    for i in 0..rows {
        for j in 0..cols {
            let v = &mut c[i * rs + j * cs];
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
    }
}

/// Matrix-vector and outer-product shapes, where a blocked kernel spends
/// most of its time packing.
#[allow(clippy::too_many_arguments)]
fn thin_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (ars, acs): (usize, usize),
    b: &[T],
    (brs, bcs): (usize, usize),
    beta: T,
    c: &mut [T],
    (crs, ccs): (usize, usize),
) {
    scale_c(beta, c, m, n, (crs, ccs));
    if m == 1 && brs != 1 {
        // Row vector times row-major matrix: accumulate scaled rows of b.
        for p in 0..k {
            axpy(alpha * a[p * acs], &b[p * brs..], bcs, c, ccs, n);
        }
    } else if n == 1 && acs != 1 {
        for p in 0..k {
            axpy(alpha * b[p * brs], &a[p * acs..], ars, c, crs, m);
        }
    } else if m == 1 || n == 1 {
        for i in 0..m {
            for j in 0..n {
                let d = dot(&a[i * ars..], acs, &b[j * bcs..], brs, k);
                let v = &mut c[i * crs + j * ccs];
                *v = *v + alpha * d;
            }
        }
    } else {
        for i in 0..m {
            axpy(alpha * a[i * ars], b, bcs, &mut c[i * crs..], ccs, n);
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                if m == 1 || n == 1 || k == 1 {
                    thin_gemm(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, c_strides);
                    return;
                }
                // SAFETY: every addressed element lies inside the checked slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn gemm_transposed_strides() {
        // a^T where a is stored 3x2 row-major
        let a = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 1.0, 1.0];
        let mut c = [0.0f32; 2];
        f32::gemm(2, 3, 1, 1.0, &a, (1, 2), &b, (1, 1), 0.0, &mut c, (1, 1));
        assert_eq!(c, [6.0, 15.0]);
    }

    #[test]
    fn thin_shapes_match_naive_in_every_layout() {
        let vals = |len: usize, off: f64| -> Vec<f64> { (0..len).map(|v| ((v as f64) * 0.37 + off).sin()).collect() };
        for &(m, k, n) in &[(1, 5, 7), (6, 4, 1), (5, 1, 3), (1, 1, 1), (1, 6, 1)] {
            for a_t in [false, true] {
                for b_t in [false, true] {
                    for c_t in [false, true] {
                        let (a, b) = (vals(m * k, 0.1), vals(k * n, 0.7));
                        let sa = if a_t { (1, m) } else { (k, 1) };
                        let sb = if b_t { (1, k) } else { (n, 1) };
                        let sc = if c_t { (1, m) } else { (n, 1) };
                        let mut c = vals(m * n, 1.3);
                        let before = c.clone();
                        f64::gemm(m, k, n, 0.5, &a, sa, &b, sb, 2.0, &mut c, sc);
                        for i in 0..m {
                            for j in 0..n {
                                let dotp: f64 = (0..k).map(|p| a[i * sa.0 + p * sa.1] * b[p * sb.0 + j * sb.1]).sum();
                                let at = i * sc.0 + j * sc.1;
                                assert!((c[at] - (0.5 * dotp + 2.0 * before[at])).abs() < 1e-12, "{m}x{k}x{n}");
                            }
                        }
                    }
                }
            }
        }
        let mut c = [f64::NAN; 3];
        f64::gemm(1, 2, 3, 1.0, &[1.0, 1.0], (2, 1), &[1.0; 6], (3, 1), 0.0, &mut c, (3, 1));
        assert_eq!(c, [2.0; 3]);
    }
}
