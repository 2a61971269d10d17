//! Scalar abstraction shared by the geometry and network code.

use std::fmt::Debug;

use nalgebra::RealField;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar usable in the pose solver and the energy network: `f32` or `f64`.
pub trait Real:
    RealField + Float + FromPrimitive + ToPrimitive + Copy + Default + Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for literals and file data.
    fn of(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("f64 is representable")
    }

    /// Widening conversion to `f64`.
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
