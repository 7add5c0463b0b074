//! Floating-point element types usable by the tensor engine.
//!
//! The model runs in `f32`; gradient checks switch the whole stack to `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Size of one element in bytes.
    const BYTES: usize;

    /// General matrix multiply `C = alpha * A * B + beta * C` over strided views.
    ///
    /// All strides are in elements and must be non-negative.
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

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw bit pattern widened to 64 bits, for hashing and bitwise comparison.
    fn bits(self) -> u64;
}

fn check_view(name: &str, len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        last < len,
        "gemm view {name} out of bounds: last index {last}, len {len}"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $bytes:expr, $gemm:path, $bits:expr) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_view("a", a.len(), m, k, rsa, csa);
                check_view("b", b.len(), k, n, rsb, csb);
                check_view("c", c.len(), m, n, rsc, csc);
                // SAFETY: every strided view was bounds-checked above and `c`
                // is uniquely borrowed, so the kernel only touches valid memory.
                unsafe {
                    $gemm(
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

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn bits(self) -> u64 {
                $bits(self)
            }
        }
    };
}

impl_scalar!(f32, 4, matrixmultiply::sgemm, |v: f32| v.to_bits() as u64);
impl_scalar!(f64, 8, matrixmultiply::dgemm, |v: f64| v.to_bits());
