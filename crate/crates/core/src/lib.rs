//! Learning orthogonal maps between embedding spaces from lexicons that may
//! contain wrong pairs.
//!
//! [`align`] holds the baseline solvers (Procrustes, SGD least squares),
//! [`em`] the noise-aware mixture model, [`eval`] retrieval metrics and
//! semantic-shift ranking, and [`experiments`] the end-to-end runs behind
//! the command-line tool.

pub mod align;
pub mod em;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;

pub use error::{AlignError, Result};
