//! Dense-tensor arithmetic with reverse-mode autodiff and AdamW.
//!
//! Everything here is generic over the scalar type so the training path
//! (f32) and the finite-difference check path (f64) run the exact same code.
//! Reductions that the rest of the pipeline depends on for accuracy (losses,
//! means) always accumulate in f64 regardless of the scalar type.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamWConfig, AdamW};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};

/// Scalar element type for tensors. Implemented for f32 and f64.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Copy + Send + Sync + Debug + Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}
