//! Minimal reverse-mode automatic differentiation for the transformer.

mod mat;
mod tape;

pub use mat::{matmul, Mat};
pub use tape::{AttnGroups, Gradients, Tape, Var};
