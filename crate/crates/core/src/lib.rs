// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod degradations;
pub mod error;
pub mod fsutil;
pub mod instruct;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tensor};
