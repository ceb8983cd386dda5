//! Range regularization lab: train small models with weight-range penalties,
//! then measure how well they survive quantization-aware training and
//! weight palettization.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod analytics;
pub mod config;
pub mod data_io;
pub mod error;
pub mod finite_diff;
pub mod model;
pub mod palettizers;
pub mod quantizers;
pub mod regularizers;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
