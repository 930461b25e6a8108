//! Multi-modal image registration with Mamba-augmented convolutional sparse coding.

// Negated float comparisons in this crate are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod extractors;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod registration;
pub mod roi_mask;
pub mod sparse_coding;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ParamId, ParamStore, Tensor};
