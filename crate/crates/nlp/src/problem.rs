/// A smooth nonlinear program
///
/// ```txt
///   min  f(x)
///   s.t. cl <= c(x) <= cu
///        xl <=  x   <= xu
/// ```
///
/// Rows with `cl == cu` are equalities. Variables with `xl == xu` are held
/// fixed and eliminated from the step computation. Sparse derivatives follow
/// the triplet convention: structure is queried once, values every
/// evaluation, and repeated coordinates are summed.
pub trait NlpProblem: Sync {
    fn num_variables(&self) -> usize;
    fn num_constraints(&self) -> usize;

    fn variable_bounds(&self, lower: &mut [f64], upper: &mut [f64]);
    fn constraint_bounds(&self, lower: &mut [f64], upper: &mut [f64]);

    fn objective(&self, x: &[f64]) -> f64;
    fn objective_gradient(&self, x: &[f64], grad: &mut [f64]);
    fn constraints(&self, x: &[f64], c: &mut [f64]);

    /// `(row, col)` of every Jacobian entry.
    fn jacobian_structure(&self) -> Vec<(usize, usize)>;
    fn jacobian_values(&self, x: &[f64], values: &mut [f64]);

    /// `(row, col)` with `row >= col` of every entry of the Lagrangian Hessian.
    fn hessian_structure(&self) -> Vec<(usize, usize)>;
    /// Values of `obj_factor * ∇²f + Σ multipliers[i] * ∇²c_i`.
    fn hessian_values(&self, x: &[f64], obj_factor: f64, multipliers: &[f64], values: &mut [f64]);

    /// Variables that must end at 0 or 1. Their `[0, 1]` bounds are the
    /// caller's responsibility.
    fn binary_variables(&self) -> Vec<usize> {
        Vec::new()
    }

    /// Convex problems report `Optimal` instead of `LocallyOptimal`.
    fn is_convex(&self) -> bool {
        false
    }

    /// Alternative binary assignment consistent with the continuous part of
    /// `x`, tried when the rounded assignment cannot be polished. Returns the
    /// binary values in the order of [`NlpProblem::binary_variables`].
    fn repair_binaries(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}
