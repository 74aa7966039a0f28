use std::fmt::Write as _;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// KKT point of a problem declared convex.
    Optimal,
    LocallyOptimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::LocallyOptimal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::LocallyOptimal => "locally_optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::IterationLimit => "iteration_limit",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mu: f64,
    /// Penalty weight of the homotopy stage this iteration belongs to.
    pub rho: f64,
    /// Max-norm constraint violation.
    pub violation: f64,
    pub objective: f64,
    pub dual_infeasibility: f64,
    pub theta: f64,
    pub phi: f64,
    pub step: f64,
    pub restoration: bool,
    pub filter_reset: bool,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Constraint multipliers of the final solve.
    pub multipliers: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub violation: f64,
    /// `max |y − y²|` over binaries at the end of the homotopy, before rounding.
    pub integrality_gap: f64,
    /// Same quantity at the returned point.
    pub final_integrality_gap: f64,
    /// Whether the returned binaries came from the problem's repair hook.
    pub repaired: bool,
    pub iterations: usize,
    pub wall_time: Duration,
    pub log: Vec<IterationRecord>,
    /// Index of the multi-start candidate that produced this report.
    pub start_index: usize,
}

impl SolveReport {
    /// Fixed-width text rendering of the iteration log.
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>10} {:>10} {:>14} {:>10} {:>10} {:>10} {:>14} {:>9} {:>3} {:>3}",
            "iter", "mu", "rho", "objective", "viol", "inf_du", "theta", "phi", "alpha", "R", "F"
        );
        for r in &self.log {
            let _ = writeln!(
                out,
                "{:>5} {:>10.3e} {:>10.3e} {:>14.7e} {:>10.3e} {:>10.3e} {:>10.3e} {:>14.7e} {:>9.3e} {:>3} {:>3}",
                r.iteration,
                r.mu,
                r.rho,
                r.objective,
                r.violation,
                r.dual_infeasibility,
                r.theta,
                r.phi,
                r.step,
                if r.restoration { "r" } else { "" },
                if r.filter_reset { "f" } else { "" },
            );
        }
        out
    }
}
