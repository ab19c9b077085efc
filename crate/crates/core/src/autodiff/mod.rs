//! Reverse-mode differentiation, parameters, optimizer and gradient checks.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use matrix::Matrix;
pub use optim::{adamw_update, AdamWConfig, AdamWState};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Tape, Var, LAYER_NORM_EPS};

#[cfg(test)]
mod tests;
