//! The floating-point abstraction every numerical routine is generic over.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the models, steppers and checkers (`f32` or `f64`).
///
/// `RealField` supplies the linear algebra; the `num-traits` conversions are
/// used for literals and for reporting values in `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + LowerExp + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    /// Lossy conversion for diagnostics and error payloads.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Absolute value (avoids the `Signed`/`ComplexField` method ambiguity).
    #[inline]
    fn mag(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    /// Machine epsilon.
    #[inline]
    fn eps() -> Self {
        Self::default_epsilon()
    }

    /// Default absolute tolerance for Newton solves: `1e-12`, or a small
    /// multiple of epsilon when the type cannot resolve that.
    fn default_newton_tol() -> Self {
        Self::lit(1e-12).max(Self::lit(64.0) * Self::eps())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
