//! Sparse LDLᵀ factorization for symmetric quasi-definite KKT matrices.
//!
//! The factorization is the classic up-looking simplicial algorithm with a
//! fixed fill-reducing ordering (AMD from `faer`) and no numerical pivoting.
//! Inertia is read directly off the signs of `D`.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::amd;
use faer::sparse::{SparseColMat, Triplet};

use crate::NlpError;

/// Symbolic structure of a symmetric matrix whose entries are supplied as an
/// unordered list of `(row, col)` coordinates. Coordinates may repeat and may
/// lie in either triangle; repeated coordinates are summed.
#[derive(Debug, Clone)]
pub struct SymbolicLdl {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `perm_inv[old] = new`
    perm_inv: Vec<usize>,
    /// Upper triangle (permuted) in CSC form. Duplicates are kept.
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    /// Position in `row_idx` of every input coordinate.
    slot: Vec<usize>,
    parent: Vec<Option<usize>>,
    l_ptr: Vec<usize>,
}

/// Numeric factor produced by [`SymbolicLdl::factorize`].
#[derive(Debug, Clone)]
pub struct LdlFactor {
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    d: Vec<f64>,
    positive: usize,
    negative: usize,
    zero: usize,
}

impl SymbolicLdl {
    pub fn new(n: usize, coords: &[(usize, usize)]) -> Result<Self, NlpError> {
        // AMD on the symmetrized pattern, diagonal included.
        let mut trip: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(2 * coords.len() + n);
        for &(i, j) in coords {
            debug_assert!(i < n && j < n);
            trip.push(Triplet::new(i, j, 1.0));
            if i != j {
                trip.push(Triplet::new(j, i, 1.0));
            }
        }
        for k in 0..n {
            trip.push(Triplet::new(k, k, 1.0));
        }
        let pattern = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| NlpError::Factorization(format!("pattern assembly: {e:?}")))?;
        let mut perm = vec![0usize; n];
        let mut perm_inv = vec![0usize; n];
        if n > 0 {
            let sym = pattern.symbolic();
            let req = amd::order_maybe_unsorted_scratch::<usize>(n, sym.compute_nnz());
            let mut mem = MemBuffer::new(req);
            amd::order_maybe_unsorted(
                &mut perm,
                &mut perm_inv,
                sym,
                amd::Control::default(),
                MemStack::new(&mut mem),
            )
            .map_err(|e| NlpError::Factorization(format!("amd ordering: {e:?}")))?;
        }

        // Permuted upper triangle; every input coordinate keeps its own slot
        // so numeric assembly is a plain scatter.
        let mut counts = vec![0usize; n + 1];
        let upper: Vec<(usize, usize)> = coords
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (perm_inv[i], perm_inv[j]);
                if a <= b {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect();
        for &(_, c) in &upper {
            counts[c + 1] += 1;
        }
        // Diagonal slots always exist so regularization has somewhere to go.
        for k in 0..n {
            counts[k + 1] += 1;
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let col_ptr = counts.clone();
        let mut fill = counts;
        let mut row_idx = vec![0usize; col_ptr[n]];
        let mut slot = Vec::with_capacity(upper.len());
        for &(r, c) in &upper {
            let p = fill[c];
            row_idx[p] = r;
            fill[c] += 1;
            slot.push(p);
        }
        for k in 0..n {
            let p = fill[k];
            row_idx[p] = k;
            fill[k] += 1;
        }

        // Elimination tree and column counts of L.
        let mut parent = vec![None; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in col_ptr[k]..col_ptr[k + 1] {
                let mut i = row_idx[p];
                if i < k {
                    while flag[i] != k {
                        if parent[i].is_none() {
                            parent[i] = Some(k);
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i].expect("parent set above");
                    }
                }
            }
        }
        let mut l_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_ptr[k + 1] = l_ptr[k] + lnz[k];
        }

        Ok(Self {
            n,
            perm,
            perm_inv,
            col_ptr,
            row_idx,
            slot,
            parent,
            l_ptr,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of `L` (strictly lower part).
    pub fn factor_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }

    /// Assemble numeric values. `values[k]` belongs to coordinate `k` of the
    /// list given to [`SymbolicLdl::new`]; `diag_shift[i]` is added to the
    /// diagonal of original row `i`.
    pub fn assemble(&self, values: &[f64], diag_shift: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.slot.len());
        let mut ax = vec![0.0; self.row_idx.len()];
        for (k, &p) in self.slot.iter().enumerate() {
            ax[p] += values[k];
        }
        for (old, &shift) in diag_shift.iter().enumerate() {
            let k = self.perm_inv[old];
            // The diagonal slot is the last entry of column k.
            ax[self.col_ptr[k + 1] - 1] += shift;
        }
        ax
    }

    /// Numeric factorization of assembled values (see [`Self::assemble`]).
    /// A zero pivot is reported through [`LdlFactor::zero`], not as an error.
    pub fn factorize(&self, ax: &[f64]) -> LdlFactor {
        let n = self.n;
        let mut l_idx = vec![0usize; self.l_ptr[n]];
        let mut l_val = vec![0.0; self.l_ptr[n]];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        let (mut positive, mut negative, mut zero) = (0, 0, 0);

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for p in self.col_ptr[k]..self.col_ptr[k + 1] {
                let mut i = self.row_idx[p];
                y[i] += ax[p];
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = self.parent[i].expect("etree reaches k");
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            let mut dk = y[k];
            y[k] = 0.0;
            while top < n {
                let i = pattern[top];
                let yi = y[i];
                y[i] = 0.0;
                let start = self.l_ptr[i];
                let end = start + lnz[i];
                for p in start..end {
                    y[l_idx[p]] -= l_val[p] * yi;
                }
                let lki = if d[i] != 0.0 { yi / d[i] } else { 0.0 };
                dk -= lki * yi;
                l_idx[end] = k;
                l_val[end] = lki;
                lnz[i] += 1;
                top += 1;
            }
            if dk > 0.0 && dk.is_finite() {
                positive += 1;
            } else if dk < 0.0 && dk.is_finite() {
                negative += 1;
            } else {
                zero += 1;
            }
            d[k] = dk;
        }
        LdlFactor {
            l_idx,
            l_val,
            d,
            positive,
            negative,
            zero,
        }
    }

    /// Solve `K x = b` in original ordering.
    pub fn solve(&self, factor: &LdlFactor, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        for j in 0..n {
            let xj = x[j];
            for p in self.l_ptr[j]..self.l_ptr[j + 1] {
                x[factor.l_idx[p]] -= factor.l_val[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= factor.d[j];
        }
        for j in (0..n).rev() {
            let mut xj = x[j];
            for p in self.l_ptr[j]..self.l_ptr[j + 1] {
                xj -= factor.l_val[p] * x[factor.l_idx[p]];
            }
            x[j] = xj;
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.perm[k]] = x[k];
        }
        out
    }

    /// `y = K x` with `K` given by assembled values, original ordering.
    pub fn multiply(&self, ax: &[f64], x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let xp: Vec<f64> = (0..n).map(|k| x[self.perm[k]]).collect();
        let mut yp = vec![0.0; n];
        for c in 0..n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                yp[r] += ax[p] * xp[c];
                if r != c {
                    yp[c] += ax[p] * xp[r];
                }
            }
        }
        let mut y = vec![0.0; n];
        for k in 0..n {
            y[self.perm[k]] = yp[k];
        }
        y
    }

    /// Solve with iterative refinement against the assembled matrix.
    pub fn solve_refined(&self, factor: &LdlFactor, ax: &[f64], b: &[f64], steps: usize) -> Vec<f64> {
        let mut x = self.solve(factor, b);
        let bnorm = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut prev = f64::INFINITY;
        for _ in 0..steps {
            let kx = self.multiply(ax, &x);
            let r: Vec<f64> = b.iter().zip(&kx).map(|(bi, ki)| bi - ki).collect();
            let rnorm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !rnorm.is_finite() || rnorm <= 1e-14 * bnorm || rnorm >= 0.5 * prev {
                break;
            }
            prev = rnorm;
            let dx = self.solve(factor, &r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        x
    }
}

impl LdlFactor {
    pub fn positive(&self) -> usize {
        self.positive
    }
    pub fn negative(&self) -> usize {
        self.negative
    }
    pub fn zero(&self) -> usize {
        self.zero
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn solves_small_quasi_definite_system() {
        // [4 1 2; 1 3 0; 2 0 -1]
        let dense = vec![vec![4.0, 1.0, 2.0], vec![1.0, 3.0, 0.0], vec![2.0, 0.0, -1.0]];
        let coords = vec![(0, 0), (1, 0), (2, 0), (1, 1), (2, 2)];
        let vals = vec![4.0, 1.0, 2.0, 3.0, -1.0];
        let sym = SymbolicLdl::new(3, &coords).unwrap();
        let ax = sym.assemble(&vals, &[0.0; 3]);
        let f = sym.factorize(&ax);
        assert_eq!((f.positive(), f.negative(), f.zero()), (2, 1, 0));
        let b = vec![1.0, -2.0, 0.5];
        let x = sym.solve_refined(&f, &ax, &b, 3);
        let r = dense_mul(&dense, &x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_coordinates_are_summed_and_shift_hits_diagonal() {
        let coords = vec![(0, 0), (0, 0), (1, 0), (0, 1), (1, 1)];
        let vals = vec![1.0, 1.0, 0.5, 0.5, 1.0];
        let sym = SymbolicLdl::new(2, &coords).unwrap();
        let ax = sym.assemble(&vals, &[1.0, 0.0]);
        // K = [3 1; 1 1]
        let y = sym.multiply(&ax, &[1.0, 1.0]);
        assert!((y[0] - 4.0).abs() < 1e-15 && (y[1] - 2.0).abs() < 1e-15);
        let f = sym.factorize(&ax);
        assert_eq!(f.positive(), 2);
    }

    #[test]
    fn indefinite_upper_block_shows_in_inertia() {
        // det([-1 1; 1 -1e-8]) < 0, so one eigenvalue of each sign.
        let coords = vec![(0, 0), (1, 0), (1, 1)];
        let sym = SymbolicLdl::new(2, &coords).unwrap();
        let ax = sym.assemble(&[-1.0, 1.0, -1e-8], &[0.0, 0.0]);
        let f = sym.factorize(&ax);
        assert_eq!((f.positive(), f.negative(), f.zero()), (1, 1, 0));
        let ax = sym.assemble(&[-1.0, 0.1, -1.0], &[0.0, 0.0]);
        let f = sym.factorize(&ax);
        assert_eq!((f.positive(), f.negative(), f.zero()), (0, 2, 0));
    }

    #[test]
    fn random_banded_system_matches_dense_product() {
        let n = 60;
        let mut coords = Vec::new();
        let mut vals = Vec::new();
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            coords.push((i, i));
            let d = if i < 40 { 5.0 + i as f64 * 0.01 } else { -2.0 };
            vals.push(d);
            dense[i][i] += d;
            for off in [1usize, 7, 23] {
                if i + off < n {
                    let v = ((i * 31 + off * 17) % 11) as f64 / 11.0 - 0.5;
                    coords.push((i + off, i));
                    vals.push(v);
                    dense[i + off][i] += v;
                    dense[i][i + off] += v;
                }
            }
        }
        let sym = SymbolicLdl::new(n, &coords).unwrap();
        let ax = sym.assemble(&vals, &vec![0.0; n]);
        let f = sym.factorize(&ax);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = sym.solve_refined(&f, &ax, &b, 5);
        let r = dense_mul(&dense, &x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10, "{ri} vs {bi}");
        }
    }
}
