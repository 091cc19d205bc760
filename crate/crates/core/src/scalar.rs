//! Floating point element types usable by tensors and networks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of a [`Tensor`](crate::Tensor): `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short name recorded in checkpoint headers.
    const DTYPE: &'static str;
    /// Size of one element in a little-endian payload.
    const BYTES: usize;

    /// Lossy conversion from `f64`; used for literals and sampled values.
    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
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

/// Largest element offset reachable in an `rows x cols` view with the given strides.
fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    (a_len, a_s): (usize, (isize, isize)),
    (b_len, b_s): (usize, (isize, isize)),
    (c_len, c_s): (usize, (isize, isize)),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_offset(m, k, a_s) < a_len, "gemm: lhs view out of bounds");
        assert!(max_offset(k, n, b_s) < b_len, "gemm: rhs view out of bounds");
    }
    assert!(max_offset(m, n, c_s) < c_len, "gemm: output view out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:ident) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

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
            ) {
                check_gemm_bounds(m, k, n, (a.len(), a_strides), (b.len(), b_strides), (c.len(), c_strides));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked against its slice above.
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        alpha,
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

impl_scalar!(f32, "f32", sgemm);
impl_scalar!(f64, "f64", dgemm);
