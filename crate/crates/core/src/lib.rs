// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod evalbench;
pub mod harness;
pub mod losses;
pub mod mining;
pub mod model;

pub use error::{Error, Result};
