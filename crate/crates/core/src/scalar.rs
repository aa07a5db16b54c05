//! Scalar abstraction shared by every numerical module.
//!
//! All solvers are written against [`Scalar`], so the same code runs in `f64`
//! (the default, used by the pipeline and the file formats) and in `f32`.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Real floating-point type usable throughout the crate.
pub trait Scalar: RealField + Copy + ToPrimitive + std::fmt::LowerExp {
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    /// Lossy conversion to `f64`, used for reporting and persistence.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for [`Scalar::lit`].
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::lit(x)
}
