//! Floating-point abstraction shared by every numeric module.
//!
//! Training runs in `f32`; gradient checks and analytic oracles run the same
//! code paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

pub trait Scalar:
    NdFloat + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + 'static
{
    const NAME: &'static str;

    /// Lossy conversion from `f64`; every `f64` maps to some value of `Self`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every supported scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("supported scalars convert to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip_representable_values() {
        assert_eq!(f32::of(0.5).f64(), 0.5);
        assert_eq!(f64::of(-1.25), -1.25);
        assert_eq!(f32::NAME, "f32");
    }
}
