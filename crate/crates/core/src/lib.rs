#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod matrix_core;
pub mod rng;
pub mod task_gen;
pub mod mtl_model;
pub mod closed_form;
pub mod trainer;
pub mod weighting;
pub mod analysis;
pub mod harness;

pub use error::{Error, Result};
pub use matrix_core::DenseMatrix;
