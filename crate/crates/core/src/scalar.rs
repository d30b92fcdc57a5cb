//! Floating-point element type shared by the tensor engine, the gates and
//! the networks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable as a tensor element.
///
/// Besides the usual float arithmetic an implementor provides a general
/// strided matrix multiply, which is where nearly all of the time goes in
/// dense and convolution layers.
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
    /// Short type name, used in diagnostics.
    const NAME: &'static str;

    /// `c <- alpha * a * b + beta * c` where `a` is `m x k`, `b` is
    /// `k x n` and `c` is `m x n`, all addressed through row/column strides.
    ///
    /// Panics if any operand slice is too short for the given geometry.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    /// Lossy conversion from `f64`; every finite `f64` maps to some value.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to `f64`.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every pointer offset reachable from the strides and
                // dimensions was bounds-checked against the slices above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
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
    fn gemm_agrees_across_precisions() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c64 = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c64, 2, 1);
        assert_eq!(c64, [58.0, 64.0, 139.0, 154.0]);

        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut c32 = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a32, 3, 1, &b32, 2, 1, 0.0, &mut c32, 2, 1);
        assert_eq!(c32, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_strides() {
        // a^T * a for a = [[1, 2], [3, 4]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 1, 2, &a, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }
}
