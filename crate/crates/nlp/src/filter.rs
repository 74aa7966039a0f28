//! Two-dimensional filter over (constraint violation, barrier merit).

/// Margin parameters γ_θ and γ_φ.
pub const GAMMA_THETA: f64 = 1e-5;
pub const GAMMA_PHI: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Filter {
    entries: Vec<(f64, f64)>,
}

impl Filter {
    /// Empty filter with the upper violation bound `theta_max`.
    pub fn new(theta_max: f64) -> Self {
        Self {
            entries: vec![(theta_max, f64::NEG_INFINITY)],
        }
    }

    pub fn reset(&mut self, theta_max: f64) {
        self.entries.clear();
        self.entries.push((theta_max, f64::NEG_INFINITY));
    }

    /// A pair is acceptable when no stored entry dominates it.
    pub fn is_acceptable(&self, theta: f64, phi: f64) -> bool {
        if !theta.is_finite() || !phi.is_finite() {
            return false;
        }
        self.entries.iter().all(|&(t, p)| theta < t || phi < p)
    }

    /// Store the margin-shifted image of `(theta, phi)` and drop entries it
    /// dominates.
    pub fn augment(&mut self, theta: f64, phi: f64) {
        let t = (1.0 - GAMMA_THETA) * theta;
        let p = phi - GAMMA_PHI * theta;
        self.entries.retain(|&(et, ep)| !(et >= t && ep >= p));
        self.entries.push((t, p));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }
}

/// Sufficient progress of a trial pair relative to the current iterate.
pub fn sufficient_progress(theta: f64, phi: f64, theta_trial: f64, phi_trial: f64) -> bool {
    theta_trial <= (1.0 - GAMMA_THETA) * theta || phi_trial <= phi - GAMMA_PHI * theta
}
