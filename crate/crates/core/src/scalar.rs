//! Scalar abstraction so the same tensor/encoder/trainer code runs in f32
//! (training) and f64 (gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, NumCast};

/// Method names avoid the `FromPrimitive`/`ToPrimitive` ones so plain
/// `S::of_f64(x)` never needs disambiguation.
pub trait Scalar:
    Float + FromPrimitive + NumCast + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of_f64(x: f64) -> Self {
        NumCast::from(x).expect("f64 -> scalar")
    }

    fn of_f32(x: f32) -> Self {
        NumCast::from(x).expect("f32 -> scalar")
    }

    fn of_usize(n: usize) -> Self {
        Self::of_f64(n as f64)
    }

    fn as_f64(self) -> f64 {
        NumCast::from(self).expect("scalar -> f64")
    }

    fn as_f32(self) -> f32 {
        // The cast truncates f64 -> f32 with round-to-nearest, which is what
        // checkpoint serialization wants.
        self.as_f64() as f32
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
