//! Scalar abstraction: the numeric type every tensor is generic over.

use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar for tensors and everything built on them.
///
/// All stochastic values are drawn in `f64` and converted, so `f32` and `f64`
/// instantiations of the same seed see the same sample sequence (up to
/// rounding). Concrete aliases live at the crate root.
pub trait Real: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {
    /// Lossless-enough conversion from `f64` literals and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Conversion to `f64` for serialization and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
