//! Multi-level knowledge distillation: representation alignment, relational
//! correlation and supervised contrastive transfer between a frozen teacher
//! and a trainable student, together with the training loops, evaluation
//! protocols and perturbation-based knowledge quantification used to study
//! them.
//!
//! The crate is `no_std` (with `alloc`). File formats, reports and the
//! command-line driver live in the `mlkd` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod data;
mod error;
pub mod evaluation;
pub mod info_bound;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod quantification;
pub mod rng;
pub mod tensor;
pub mod training;

pub use crate::error::{Error, Result};
pub use crate::tensor::Tensor;
