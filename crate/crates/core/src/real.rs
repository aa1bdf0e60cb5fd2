//! Scalar abstraction for the numeric core.
//!
//! Everything numeric is generic over [`Real`]; the crate root exports
//! concrete `f64` aliases, which the rest of the pipeline (and all of the
//! tolerance-bearing tests) use. `f32` is available for experiments where
//! memory matters more than gradient-check headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into the scalar type.
    fn cast(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
