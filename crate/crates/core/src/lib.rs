//! Hessian-free training of feedforward networks.
//!
//! The outer loop ([`hf`]) minimises a damped Gauss-Newton quadratic model
//! with a flexible preconditioned conjugate-gradient solver ([`krylov`]),
//! preconditioned by a limited-memory BFGS operator built from the solver's
//! own iterates ([`precond`]). Gradient and curvature samples are chosen by
//! [`sampling`]; [`corpus`] provides synthetic utterance data and the
//! deterministic sharded reduction every data pass goes through.

// `!(x > 0.0)` is deliberate throughout: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod hf;
pub mod krylov;
pub mod linalg;
pub mod model;
pub mod precond;
pub mod sampling;

pub use error::{Error, Result};
