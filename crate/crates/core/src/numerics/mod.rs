//! Dense tensors, a seeded random stream, and a reverse-mode tape.

mod rng;
mod tape;
mod tensor;

pub use rng::{Rng, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

pub(crate) use tape::{sigmoid, softmax_slice};
