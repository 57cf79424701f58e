//! Minimal reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`] walks it in
//! reverse. Everything is generic over [`Real`] so the same network runs in `f32` for training
//! and in `f64` for finite-difference gradient checks.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{conv_out_dim, gemm};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;

/// Scalar type the engine computes in.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + ndarray::LinalgScalar + Sum + Debug + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
