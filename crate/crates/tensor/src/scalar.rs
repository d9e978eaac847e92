use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of a [`crate::Tensor`].
///
/// Implemented for `f32` (training) and `f64` (gradient verification).
pub trait Scalar: num_like::Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
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

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path, $erf:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
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
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs buffer too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs buffer too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: out buffer too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel lies inside the
                // extents asserted above.
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

impl_scalar!(f32, "f32", matrixmultiply::sgemm, libm::erff);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, libm::erf);

/// The handful of float operations the kernels need, without pulling in a
/// numeric-traits crate.
pub mod num_like {
    use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait Float:
        Copy
        + PartialOrd
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn powf(self, p: Self) -> Self;
        fn is_finite(self) -> bool;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        fn neg_infinity() -> Self;
        fn floor(self) -> Self;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                #[inline]
                fn zero() -> Self {
                    0.0
                }
                #[inline]
                fn one() -> Self {
                    1.0
                }
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn powf(self, p: Self) -> Self {
                    <$t>::powf(self, p)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                #[inline]
                fn min(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }
                #[inline]
                fn neg_infinity() -> Self {
                    <$t>::NEG_INFINITY
                }
                #[inline]
                fn floor(self) -> Self {
                    <$t>::floor(self)
                }
            }
        };
    }

    impl_float!(f32);
    impl_float!(f64);
}
