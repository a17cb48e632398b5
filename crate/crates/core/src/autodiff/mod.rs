//! Reverse-mode differentiation over batched dense arrays.

mod backend;
mod eager;
mod matrix;
mod params;
mod tape;

pub use backend::{sigmoid, softplus, softplus_inverse, Activation, Backend, Binary, Unary};
pub use eager::Eager;
pub use matrix::{pairwise_sum, Matrix};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{DiffArray, Tape};

#[cfg(test)]
mod fd_tests;
