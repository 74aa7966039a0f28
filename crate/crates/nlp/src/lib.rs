//! Sparse nonlinear programming for models with a handful of binary switches.
//!
//! [`solve`] runs a primal-dual interior-point method on the continuous
//! relaxation, drives binaries toward `{0, 1}` with a growing penalty
//! `ρ·Σ(y − y²)²`, rounds them and re-solves with the binaries fixed.

pub mod driver;
pub mod filter;
pub mod ipm;
pub mod ldl;
pub mod options;
pub mod problem;
pub mod report;

pub use driver::{kkt_residual, multi_start, resolve_fixed, solve};
pub use options::{BarrierSchedule, PenaltySchedule, SolverOptions};
pub use problem::NlpProblem;
pub use report::{IterationRecord, SolveReport, SolveStatus};

#[derive(Debug, thiserror::Error)]
pub enum NlpError {
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("inconsistent bounds: {0}")]
    InconsistentBounds(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}
