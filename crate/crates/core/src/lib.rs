//! Sparse, human-readable decompositions of a diffusion model's concept
//! representations over its token vocabulary, run against a small
//! self-contained text-to-image subject model with known compositional
//! ground truth.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod conceptor;
pub mod decomposer;
pub mod concepts;
pub mod error;
pub mod image;
pub mod optim;
pub mod oracle;
pub mod persist;
pub mod subject;

pub use error::{Error, Result};
