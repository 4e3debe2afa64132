#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
