//! Learnable token merging for vision transformers, driven by a separable
//! variational bound on the information-bottleneck loss.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod flops;
pub mod ib;
pub mod mask;
pub mod numerics;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use numerics::{Rng, Scalar, Tape, Tensor, Var};
