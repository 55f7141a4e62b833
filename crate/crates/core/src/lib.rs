//! Flow-based black-box adversarial attacks.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod blackbox;
pub mod data;
pub mod detect;
pub mod diffcore;
pub mod domain;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod resample;
pub mod rng;

pub use error::{Error, Result};
