//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Real floating-point scalar usable by the fitting and forecasting code.
///
/// Implemented for `f32` and `f64`. Everything in the crate is written against
/// this trait; the aliases in the crate root pin it to `f64`.
pub trait Real: RealField + Copy + ToPrimitive {
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        nalgebra::convert(v)
    }

    /// Converts a count into the scalar type.
    #[inline]
    fn from_count(n: usize) -> Self {
        nalgebra::convert(n as f64)
    }

    /// Machine epsilon.
    #[inline]
    fn eps() -> Self {
        Self::default_epsilon()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn infinity() -> Self {
        Self::lit(f64::INFINITY)
    }

    #[inline]
    fn neg_infinity() -> Self {
        Self::lit(f64::NEG_INFINITY)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Relative tolerance used to decide that an eigenvalue is numerically zero.
#[inline]
pub(crate) fn rank_tolerance<T: Real>() -> T {
    T::eps() * T::lit(1.0e4)
}
