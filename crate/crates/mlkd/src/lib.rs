//! File formats, reports, experiment configs and the command-line driver
//! around `mlkd-core`.

// `!(x < 1.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod format;
pub mod report;

pub use error::{MlkdError, Result};
