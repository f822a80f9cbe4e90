// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod brownian;
pub mod error;
pub mod harness;
pub mod model;
pub mod stats;
pub mod stepper;
pub mod taming;
pub mod verify;

pub use error::{Error, Result};
