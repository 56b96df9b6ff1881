//! Small numeric helpers shared by the math modules.

use nalgebra::{DMatrix, RealField};

/// Scalar types the editing math runs in (`f32` and `f64`).
pub trait Real: RealField + Copy + Send + Sync {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub fn cast<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::of)
}

pub fn widen<T: Real>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(Real::as_f64)
}

pub fn all_finite<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| v.is_finite())
}
