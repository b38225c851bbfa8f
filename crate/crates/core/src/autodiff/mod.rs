//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
mod check;
mod graph;
mod gru;

pub use array::Array;
pub use check::{
    grad_check, grad_check_with, relative_error, relative_error_floored, GradCheckOptions, GradCheckReport,
    DEFAULT_STEP, REL_FLOOR,
};
pub use graph::{Graph, Var};
pub use gru::{gru_cell, gru_sequence, gru_step, GruParams, GruVars, GRU_TENSOR_NAMES};

/// Epsilon inside the square root of `l2_normalize`.
pub const L2_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests;
