//! Dense matrices and the autodiff tape used by every loss in the crate.

pub mod gradcheck;
mod matrix;
mod tape;

pub use matrix::{Matrix, MAX_PIVOT_RATIO};
pub use tape::{Fault, Tape, Var, ROW_NORM_EPS};

pub(crate) use matrix::{dot, norm};
pub(crate) use tape::log_sum_exp;
