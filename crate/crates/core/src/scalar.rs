//! Scalar abstraction shared by the geometric and metric code.

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar usable by every generic routine in this crate.
///
/// Implemented for `f32` and `f64`; the training stack is fixed to `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; panics only for types that cannot hold finite `f64` values.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion from f64")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("scalar conversion from usize")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
