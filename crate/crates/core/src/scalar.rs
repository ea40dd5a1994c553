//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the models are generic over (`f32` or `f64`).
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal or file value.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every supported scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts a slice of `f64` into an owned vector of `T`.
pub fn vector_from_f64<T: Scalar>(values: &[f64]) -> nalgebra::DVector<T> {
    nalgebra::DVector::from_iterator(values.len(), values.iter().map(|&v| T::of(v)))
}

pub fn vector_to_f64<T: Scalar>(v: &nalgebra::DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

pub fn all_finite<T: Scalar>(v: &nalgebra::DVector<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}
