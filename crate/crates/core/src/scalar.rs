//! Floating-point element types the tensor engine is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (the training precision) and `f64` (gradient-check
/// precision). Matrix products dispatch to the matching packed GEMM kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a · b` (or `c += a · b` when `accumulate`) for an `m×k` by `k×n`
    /// product with arbitrary row/column strides on every operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
        accumulate: bool,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs()
}

fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], (isize, isize)),
    b: (&[T], (isize, isize)),
    c: (&[T], (isize, isize)),
) {
    assert!(m * k == 0 || max_offset(m, k, a.1) < a.0.len(), "gemm: lhs out of bounds");
    assert!(k * n == 0 || max_offset(k, n, b.1) < b.0.len(), "gemm: rhs out of bounds");
    assert!(m * n == 0 || max_offset(m, n, c.1) < c.0.len(), "gemm: out out of bounds");
    assert!(
        a.1 .0 >= 0 && a.1 .1 >= 0 && b.1 .0 >= 0 && b.1 .1 >= 0 && c.1 .0 >= 0 && c.1 .1 >= 0,
        "gemm: negative strides unsupported"
    );
}

macro_rules! impl_scalar {
    ($ty:ty, $name:literal, $kernel:path) => {
        impl Scalar for $ty {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                c_strides: (isize, isize),
                accumulate: bool,
            ) {
                check_gemm_bounds(m, k, n, (a, a_strides), (b, b_strides), (c, c_strides));
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every offset reachable through the given strides was
                // bounds-checked against the slice lengths above and all
                // strides are non-negative.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
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

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_strides() {
        // a = [[1,2],[3,4]] read transposed
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, (2, 1), false);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
        f64::gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, (2, 1), true);
        assert_eq!(c, [2.0, 6.0, 4.0, 8.0]);
    }
}
