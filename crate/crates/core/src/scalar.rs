//! Element traits shared by real and complex tensors.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Tensor element: a real float or a complex number over one.
pub trait Scalar: Copy + Default + Debug + Send + Sync + NumAssign + Sum + 'static {
    /// Container dtype code.
    const DTYPE: u8;
    /// Whether `conj` can differ from the identity.
    const COMPLEX: bool = false;

    fn from_f64(x: f64) -> Self;
    fn conj(self) -> Self;
    /// |x| in double precision, used for error metrics.
    fn modulus(self) -> f64;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` for strided row-major-ish operands,
    /// a: m×k, b: k×n, c: m×n.
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
    ) {
        for i in 0..m {
            for j in 0..n {
                let cij = &mut c[i * rsc + j * csc];
                *cij = if beta == Self::zero() { Self::zero() } else { beta * *cij };
            }
            for p in 0..k {
                let aip = alpha * a[i * rsa + p * csa];
                if aip == Self::zero() {
                    continue;
                }
                for j in 0..n {
                    c[i * rsc + j * csc] += aip * b[p * rsb + j * csb];
                }
            }
        }
    }
}


/// Real floating point precision (f32 or f64).
pub trait Real:
    Scalar + Float + FromPrimitive + bytemuck::Pod + Display + PartialOrd
{
    const NAME: &'static str;
    fn of(x: f64) -> Self {
        <Self as Scalar>::from_f64(x)
    }
    fn as_f64(self) -> f64;
}

macro_rules! real_impl {
    ($t:ty, $code:expr, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: u8 = $code;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn conj(self) -> Self {
                self
            }
            #[inline]
            fn modulus(self) -> f64 {
                (self as f64).abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
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
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a too short");
                assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b too short");
                assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c too short");
                // SAFETY: every index touched is bounds-checked by the asserts above.
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
                    )
                }
            }
        }
        impl Real for $t {
            const NAME: &'static str = $name;
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

real_impl!(f32, 0, "f32", matrixmultiply::sgemm);
real_impl!(f64, 1, "f64", matrixmultiply::dgemm);

impl<T: Real> Scalar for Complex<T> {
    const DTYPE: u8 = T::DTYPE + 2;
    const COMPLEX: bool = true;
    #[inline]
    fn from_f64(x: f64) -> Self {
        Complex::new(T::of(x), T::zero())
    }
    #[inline]
    fn conj(self) -> Self {
        Complex::conj(&self)
    }
    #[inline]
    fn modulus(self) -> f64 {
        self.re.as_f64().hypot(self.im.as_f64())
    }
    #[inline]
    fn is_finite(self) -> bool {
        Float::is_finite(self.re) && Float::is_finite(self.im)
    }
}

/// Reinterpret complex storage as interleaved (re, im) reals.
pub fn complex_as_real<T: Real>(z: &[Complex<T>]) -> &[T] {
    bytemuck::cast_slice(z)
}

pub fn complex_as_real_mut<T: Real>(z: &mut [Complex<T>]) -> &mut [T] {
    bytemuck::cast_slice_mut(z)
}

pub fn real_as_complex<T: Real>(x: &[T]) -> &[Complex<T>] {
    bytemuck::cast_slice(x)
}
