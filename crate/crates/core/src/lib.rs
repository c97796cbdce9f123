// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compositor;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mpf;
pub mod noise;
pub mod scene;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
