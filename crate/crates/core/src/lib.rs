//! Debiased inference on `x^T beta0` in sparse linear models whose outcomes
//! are missing at random.
//!
//! Validation code writes `!(v > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod folds;
pub mod inference;
pub mod lasso;
pub mod model;
pub mod propensity;
pub mod simgen;
pub mod solver;
pub mod stats;
pub mod tuning;
