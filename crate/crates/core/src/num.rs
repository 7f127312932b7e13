//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn from_i64_lossy(n: i64) -> Self {
        Self::from_i64(n).expect("i64 representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Complex scalar over a [`Real`].
pub type Cplx<T> = Complex<T>;

#[inline]
pub(crate) fn cx<T: Real>(re: T, im: T) -> Cplx<T> {
    Complex::new(re, im)
}

#[inline]
pub(crate) fn czero<T: Real>() -> Cplx<T> {
    Complex::new(T::zero(), T::zero())
}

#[inline]
pub(crate) fn cone<T: Real>() -> Cplx<T> {
    Complex::new(T::one(), T::zero())
}

/// `e^{i t}`.
#[inline]
pub(crate) fn cis<T: Real>(t: T) -> Cplx<T> {
    let (s, c) = t.sin_cos();
    Complex::new(c, s)
}

/// `|re| + |im|`, the cheap modulus used by the eigensolver.
#[inline]
pub(crate) fn abs1<T: Real>(z: Cplx<T>) -> T {
    z.re.abs() + z.im.abs()
}

/// Lexicographic `(Re, Im)` comparison with NaN sorted last.
pub fn cmp_re_im<T: Real>(a: &Cplx<T>, b: &Cplx<T>) -> std::cmp::Ordering {
    a.re
        .partial_cmp(&b.re)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
}

/// Reduce an angle into `[0, 2π)`.
#[inline]
pub fn wrap_two_pi<T: Real>(x: T) -> T {
    let tau = T::TAU();
    let r = x % tau;
    let r = if r < T::zero() { r + tau } else { r };
    if r >= tau {
        T::zero()
    } else {
        r
    }
}

/// Signed periodic difference `a - b` reduced into `(-π, π]`.
#[inline]
pub fn periodic_diff<T: Real>(a: T, b: T) -> T {
    let d = wrap_two_pi(a - b);
    if d > T::PI() {
        d - T::TAU()
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_stays_in_range() {
        for &x in &[-7.0f64, -1e-300, 0.0, 3.0, 6.283185307179586, 100.0] {
            let w = wrap_two_pi(x);
            assert!((0.0..std::f64::consts::TAU).contains(&w), "{x} -> {w}");
        }
        assert!(periodic_diff(0.1f64, 6.2).abs() < 0.2);
    }
}
