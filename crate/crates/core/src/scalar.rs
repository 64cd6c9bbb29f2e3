//! Scalar abstraction shared by every numerical kernel in the crate.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable by the solvers (`f32` or `f64`).
///
/// The bound is nalgebra's [`RealField`] for the linear algebra plus the
/// num-traits conversion traits for moving literals and diagnostics in and
/// out of `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    /// Lossy view as `f64`, used for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}
