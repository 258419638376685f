use std::fmt::{Debug, Display};

/// Scalar type the engine is generic over.
///
/// f32 is the training precision; f64 is used by `gradient_check` and by
/// oracle tests so finite differences are not drowned in rounding noise.
pub trait Scalar:
    num_traits::Float + ndarray::LinalgScalar + Display + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}
