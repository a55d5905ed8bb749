//! Dense tensors, a reverse-mode tape and the kernels the network is built from.
//!
//! Everything is generic over [`Real`] so the same graph can be evaluated in
//! 32-bit (training) and 64-bit (gradient checking).

pub mod attention;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use graph::{BatchNormStats, Graph, Mode, Var};
pub use tensor::Tensor;

/// Floating-point scalar usable by the tape.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
