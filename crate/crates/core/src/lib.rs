//! Numerics for Hermitized i.i.d. random matrices.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod chains;
pub mod config;
pub mod error;
pub mod experiments;
pub mod flows;
pub mod girko;
pub mod mat2;
pub mod mde;
pub mod quad;
pub mod report;
pub mod run;
pub mod spectra;
pub mod stability;
pub mod stats;
pub mod suites;

pub use error::{LabError, Result};
pub use mat2::{Mat2, C64};
