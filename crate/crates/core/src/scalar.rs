use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the solver is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the target type cannot hold,
    /// which never happens for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance used when checking that probability vectors sum to one.
    fn mass_tolerance() -> Self;

    /// Type tag stored in checkpoints.
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn mass_tolerance() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn mass_tolerance() -> Self {
        1e-12
    }
}

/// Positive part `max(x, 0)`.
#[inline(always)]
pub(crate) fn pos<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}
