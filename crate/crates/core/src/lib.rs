//! Differentiable computer-vision operators.
//!
//! Images are batched `N×C×H×W` tensors. Every operator records itself on a
//! reverse-mode [`Tape`], so losses built from color conversions, filters,
//! warps and feature descriptors can be minimized by plain gradient descent.

pub mod augment;
pub mod color;
pub mod error;
pub mod features;
pub mod filters;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BorderMode, Gradients, Real, Tape, Tensor, Var, VarId};
