use crate::NlpError;

/// Increasing-weight schedule for the binary penalty `ρ·Σ(y − y²)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySchedule {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self {
            initial: 1e-2,
            growth: 10.0,
            max: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSchedule {
    pub initial: f64,
    /// Initial μ used when the solve is warm started.
    pub warm_initial: f64,
    /// Linear reduction factor κ_μ.
    pub reduction: f64,
    /// Superlinear exponent θ_μ.
    pub exponent: f64,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            warm_initial: 1e-4,
            reduction: 0.2,
            exponent: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub complementarity_tol: f64,
    pub barrier: BarrierSchedule,
    pub penalty: PenaltySchedule,
    /// Binaries at or above this value round to 1.
    pub rounding_threshold: f64,
    /// Homotopy stops once every `|y − y²|` is below this.
    pub integrality_tol: f64,
    /// Interior-point iterations per barrier solve.
    pub max_iterations: usize,
    pub multi_start: usize,
    pub seed: u64,
    /// Relative size of multi-start perturbations.
    pub perturbation: f64,
    /// Run multi-start candidates on separate threads.
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            optimality_tol: 1e-6,
            complementarity_tol: 1e-6,
            barrier: BarrierSchedule::default(),
            penalty: PenaltySchedule::default(),
            rounding_threshold: 0.5,
            integrality_tol: 1e-8,
            max_iterations: 3000,
            multi_start: 1,
            seed: 0,
            perturbation: 0.05,
            parallel: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), NlpError> {
        let positive = [
            ("feasibility_tol", self.feasibility_tol),
            ("optimality_tol", self.optimality_tol),
            ("complementarity_tol", self.complementarity_tol),
            ("integrality_tol", self.integrality_tol),
            ("barrier.initial", self.barrier.initial),
            ("barrier.warm_initial", self.barrier.warm_initial),
            ("penalty.initial", self.penalty.initial),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NlpError::InvalidOptions(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rounding_threshold > 0.0 && self.rounding_threshold < 1.0) {
            return Err(NlpError::InvalidOptions(format!(
                "rounding_threshold must lie in (0, 1), got {}",
                self.rounding_threshold
            )));
        }
        if !(self.barrier.reduction > 0.0 && self.barrier.reduction < 1.0) {
            return Err(NlpError::InvalidOptions("barrier.reduction must lie in (0, 1)".into()));
        }
        if !(self.barrier.exponent > 1.0 && self.barrier.exponent < 2.0) {
            return Err(NlpError::InvalidOptions("barrier.exponent must lie in (1, 2)".into()));
        }
        if self.penalty.growth <= 1.0 || self.penalty.max < self.penalty.initial {
            return Err(NlpError::InvalidOptions("penalty schedule must grow".into()));
        }
        if self.multi_start == 0 {
            return Err(NlpError::InvalidOptions("multi_start must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(NlpError::InvalidOptions("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}
