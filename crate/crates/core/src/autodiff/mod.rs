//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod ops;
mod tape;

pub use ops::{gelu, sigmoid, silu, softplus, Activation, MapLayout};
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
