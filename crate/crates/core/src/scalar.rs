//! Float abstraction the whole numeric stack is generic over.
//!
//! Only `f32` and `f64` implement [`Scalar`]; the trait adds the few things
//! `num_traits::Float` lacks: checked f64 literals, a GEMM kernel, exact
//! neighbor steps for ulp-precise clamping, and little-endian (de)serialization
//! for checkpoints.

use num_traits::Float;

pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// Convert an f64 literal; panics on values unrepresentable as any float
    /// (never happens for the finite constants used here).
    fn lit(v: f64) -> Self {
        Self::from(v).expect("finite literal")
    }

    fn to_f64x(self) -> f64 {
        self.to_f64().expect("float widens to f64")
    }

    /// Largest value strictly below `self` (next float toward -inf).
    fn next_down(self) -> Self;
    /// Smallest value strictly above `self` (next float toward +inf).
    fn next_up(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Row-major C += A*B (or C = A*B when `overwrite`), with explicit strides
    /// so transposed views need no copy. Dimensions: A is m x k, B is k x n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        overwrite: bool,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:literal, $bits:ty, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $dtype;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn next_down(self) -> Self {
                if self.is_nan() || self == <$t>::NEG_INFINITY {
                    return self;
                }
                let bits = self.to_bits();
                let next = if self == 0.0 {
                    // +0 and -0 both step to the smallest negative subnormal.
                    (1 as $bits) | (1 as $bits) << (<$bits>::BITS - 1)
                } else if bits >> (<$bits>::BITS - 1) == 0 {
                    bits - 1
                } else {
                    bits + 1
                };
                <$t>::from_bits(next)
            }

            fn next_up(self) -> Self {
                if self.is_nan() || self == <$t>::INFINITY {
                    return self;
                }
                let bits = self.to_bits();
                let next = if self == 0.0 {
                    1 as $bits
                } else if bits >> (<$bits>::BITS - 1) == 0 {
                    bits + 1
                } else {
                    bits - 1
                };
                <$t>::from_bits(next)
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                overwrite: bool,
            ) {
                debug_assert!(c.len() >= m * n);
                let beta = if overwrite { 0.0 } else { 1.0 };
                unsafe {
                    $gemm(
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
    };
}

impl_scalar!(f32, "f32", u32, matrixmultiply::sgemm);
impl_scalar!(f64, "f64", u64, matrixmultiply::dgemm);
