use std::cmp::Ordering;
use std::fmt::{Debug, Display};

use num_traits::Float;

/// Element type of tensors. Training may run in either width; gradient
/// checking requires `f64` because the 1e-4 finite-difference tolerance is
/// not reachable in single precision.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + 'static
{
    const BITS: u32;

    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn from_f(x: f64) -> Self;

    /// Widening conversion to `f64` (always exact).
    fn to_f(self) -> f64;

    /// Total order including non-finite values, for deterministic sorting.
    fn total_ord(self, other: Self) -> Ordering;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn from_f(x: f64) -> Self {
        x as f32
    }

    fn to_f(self) -> f64 {
        self as f64
    }

    fn total_ord(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn from_f(x: f64) -> Self {
        x
    }

    fn to_f(self) -> f64 {
        self
    }

    fn total_ord(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }
}
