use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element codes used by the binary tensor container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            3 => Some(Dtype::U8),
            _ => None,
        }
    }
}

/// Real scalar the tensor stack is generic over. f32 is the training default;
/// f64 exists to tighten gradient-check tolerances.
pub trait Scalar:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// Default central-difference step for gradient checking at this precision.
    const CHECK_EPS: f64;
    /// Default relative-error tolerance for gradient checking at this precision.
    const CHECK_TOL: f64;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const CHECK_EPS: f64 = 1e-3;
    const CHECK_TOL: f64 = 1e-3;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const CHECK_EPS: f64 = 1e-6;
    const CHECK_TOL: f64 = 1e-6;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
