use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of every grid and parameter tensor.
///
/// Training runs in `f32`; the gradient audit runs the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("real to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
