//! Scalar abstraction shared by every numerical routine in the crate.

use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type the solver can run on (`f32` or `f64`).
pub trait Real: NdFloat + FromPrimitive + ToPrimitive + Sum + Default + 'static {
    /// Converts an `f64` literal. Panics only for values the type cannot
    /// represent at all, which never happens for the finite constants used
    /// in this crate.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in float")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
