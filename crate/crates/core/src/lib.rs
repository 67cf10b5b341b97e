//! Output-feedback LQ control of discrete-time systems with multiplicative
//! noise: closed-loop second moments, coupled Riccati equations solved by
//! policy or value iteration, and benchmarking helpers.

pub mod bench;
pub mod error;
mod linalg;
pub mod model;
pub mod moments;
pub mod riccati;

pub use error::{BenchError, ModelError, MomentsError, SolveError};
pub use linalg::{condition_number, inner, is_psd, min_sym_eigenvalue, psd_factor, symmetrize};
