//! Scalar abstraction shared by every numeric kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the pipeline is generic over (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().expect("scalar converts to f32")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Mean of values taken in ascending order, as the smallest value plus the
/// mean offset from it. Order-independent, and exact when all values agree.
pub fn order_free_mean<T: Real>(values: &mut [T]) -> T {
    assert!(!values.is_empty(), "mean of no values");
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let lo = values[0];
    let n = T::from_usize_lossy(values.len());
    lo + values.iter().fold(T::zero(), |acc, &v| acc + (v - lo)) / n
}

/// Sums values in ascending order so the result does not depend on input order.
pub fn order_free_sum<T: Real>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}
