//! Dense tensors, reverse-mode autodiff, layers and the optimiser.
//!
//! Everything is generic over the element type: `f32` for training and
//! inference, `f64` for gradient checking. The autodiff tape records ops in
//! topological order and frees interior gradients eagerly during the reverse
//! sweep, so peak memory tracks the widest layer rather than the tape length.

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tape;

pub use adam::{Adam, StepOutcome};
pub use dense::{Tensor, TensorError};
pub use nn::BnMode;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
