//! Conditional generative metamodels for sales distributions and a
//! loan-level credit-risk engine built on them.
//!
//! The offline stage fits conditional quantiles of sales on an evenly spaced
//! grid of levels, either with linear quantile regression ([`quantreg`]) or
//! with a DeepFM multi-quantile network ([`deepfm`]). The online stage
//! ([`generator`]) turns a covariate's quantile vector into an inverse-CDF
//! sampler with linear interpolation and a matching closed-form CDF. The
//! [`risk`] module evaluates default probability, expected loss, LGD and
//! generalized risk measures as functions of the loan level, exactly under
//! the generated distribution or by Monte Carlo.

// `!(a > b)` is how argument checks reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod artifact;
pub mod datagen;
pub mod deepfm;
pub mod dist;
pub mod error;
pub mod eval;
pub mod generator;
pub mod model;
pub mod quantreg;
pub mod risk;
pub mod rng;

pub use error::{Error, Result};

/// Crate version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
