//! Dense complex kernels shared by all modules.
//!
//! [`CMat`] is a minimal row-major complex matrix. The two hot kernels —
//! multiply and Gauss–Jordan inversion — are parallelized over rows with
//! rayon because the multiscale step works with site matrices of a few
//! thousand rows. Hermitian spectra are delegated to nalgebra; operator
//! norms use deterministic power iteration (fixed start vector, fixed
//! iteration budget) so repeated runs are bit-identical.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::{Error, Result};

/// Relative convergence tolerance for power iteration.
const POWER_TOL: f64 = 1e-13;
/// Iteration cap for power iteration.
const POWER_MAX_ITER: usize = 300;
/// Pivot magnitude below which Gauss–Jordan reports a singular matrix.
const PIVOT_EPS: f64 = 1e-300;

/// Row-major dense complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    nrows: usize,
    ncols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CMat {
            nrows,
            ncols,
            data: vec![Complex64::new(0.0, 0.0); nrows * ncols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(nrows: usize, ncols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::DimensionMismatch(format!(
                "storage length {} for a {nrows}×{ncols} matrix",
                data.len()
            )));
        }
        Ok(CMat { nrows, ncols, data })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.ncols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.ncols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.ncols..(r + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Complex64] {
        &mut self.data[r * self.ncols..(r + 1) * self.ncols]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Parallel matrix multiply (ikj loop: each output row accumulates
    /// scaled rows of `rhs`, which keeps the inner loop contiguous).
    pub fn mul(&self, rhs: &CMat) -> Result<CMat> {
        if self.ncols != rhs.nrows {
            return Err(Error::DimensionMismatch(format!(
                "{}×{} · {}×{}",
                self.nrows, self.ncols, rhs.nrows, rhs.ncols
            )));
        }
        let n = self.nrows;
        let p = rhs.ncols;
        let mut out = vec![Complex64::new(0.0, 0.0); n * p];
        if p == 0 {
            return CMat::from_rows(n, p, out);
        }
        out.par_chunks_mut(p).enumerate().for_each(|(i, orow)| {
            for k in 0..self.ncols {
                let aik = self.get(i, k);
                if aik.norm_sqr() == 0.0 {
                    continue;
                }
                let brow = rhs.row(k);
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        });
        CMat::from_rows(n, p, out)
    }

    pub fn matvec(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        if v.len() != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "matvec: {}×{} with vector of length {}",
                self.nrows,
                self.ncols,
                v.len()
            )));
        }
        Ok((0..self.nrows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(a, x)| a * x)
                    .sum::<Complex64>()
            })
            .collect())
    }

    pub fn add(&self, rhs: &CMat) -> Result<CMat> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &CMat) -> Result<CMat> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &CMat, f: impl Fn(Complex64, Complex64) -> Complex64) -> Result<CMat> {
        if self.nrows != rhs.nrows || self.ncols != rhs.ncols {
            return Err(Error::DimensionMismatch(format!(
                "{}×{} vs {}×{}",
                self.nrows, self.ncols, rhs.nrows, rhs.ncols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        CMat::from_rows(self.nrows, self.ncols, data)
    }

    pub fn scale(&self, c: Complex64) -> CMat {
        CMat {
            nrows: self.nrows,
            ncols: self.ncols,
            data: self.data.iter().map(|&a| a * c).collect(),
        }
    }

    pub fn neg(&self) -> CMat {
        self.scale(Complex64::new(-1.0, 0.0))
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMat {
        let mut out = CMat::zeros(self.ncols, self.nrows);
        for r in 0..self.nrows {
            for c in 0..self.ncols {
                out.set(c, r, self.get(r, c).conj());
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Deviation from the conjugate-transpose symmetry, as a max-abs value.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            for c in r..self.ncols.min(self.nrows) {
                worst = worst.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        worst
    }

    /// Inverse by Gauss–Jordan with partial pivoting on the augmented
    /// system, elimination parallelized over rows.
    pub fn invert(&self) -> Result<CMat> {
        if self.nrows != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "inverse of a {}×{} matrix",
                self.nrows, self.ncols
            )));
        }
        let n = self.nrows;
        let w = 2 * n;
        // Augmented [A | I], row-major.
        let mut aug = vec![Complex64::new(0.0, 0.0); n * w];
        for r in 0..n {
            aug[r * w..r * w + n].copy_from_slice(self.row(r));
            aug[r * w + n + r] = Complex64::new(1.0, 0.0);
        }
        for col in 0..n {
            // Partial pivot: largest magnitude in the column at or below `col`.
            let (prow, pmag) = (col..n)
                .map(|r| (r, aug[r * w + col].norm()))
                .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmag < PIVOT_EPS {
                return Err(Error::NumericalFailure(format!(
                    "singular matrix: pivot {pmag:.3e} at column {col}"
                )));
            }
            if prow != col {
                for c in 0..w {
                    aug.swap(prow * w + c, col * w + c);
                }
            }
            let pinv = Complex64::new(1.0, 0.0) / aug[col * w + col];
            for c in col..w {
                aug[col * w + c] *= pinv;
            }
            // Eliminate `col` from every other row in parallel. The pivot
            // row is copied out so rows can be updated independently.
            let pivot_row: Vec<Complex64> = aug[col * w..(col + 1) * w].to_vec();
            aug.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
                if r == col {
                    return;
                }
                let factor = row[col];
                if factor.norm_sqr() == 0.0 {
                    return;
                }
                for (c, pv) in pivot_row.iter().enumerate().skip(col) {
                    row[c] -= factor * pv;
                }
            });
        }
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            data.extend_from_slice(&aug[r * w + n..(r + 1) * w]);
        }
        CMat::from_rows(n, n, data)
    }

    /// Largest singular value via power iteration on `A†A` from the fixed
    /// all-ones start vector. Deterministic; accurate to ~`POWER_TOL`
    /// relative on generic matrices.
    pub fn opnorm(&self) -> f64 {
        if self.nrows == 0 || self.ncols == 0 {
            return 0.0;
        }
        let mut v = vec![Complex64::new(1.0, 0.0); self.ncols];
        normalize(&mut v);
        // For normalized v, ‖A†Av‖ converges to λ_max(A†A) = σ_max².
        let mut lambda = 0.0f64;
        for _ in 0..POWER_MAX_ITER {
            let av = self.matvec(&v).expect("shape checked");
            let mut w = adjoint_matvec(self, &av);
            let new = normalize(&mut w).sqrt();
            let done = (new - lambda).abs() <= POWER_TOL * new.max(1e-300);
            lambda = new;
            v = w;
            if done {
                break;
            }
        }
        lambda.sqrt()
    }

    /// Smallest singular value, computed as `1 / ‖A⁻¹‖₂` from a
    /// previously computed inverse.
    pub fn min_singular_from_inverse(inv: &CMat) -> f64 {
        let nrm = inv.opnorm();
        if nrm == 0.0 {
            0.0
        } else {
            1.0 / nrm
        }
    }

    /// Real eigenvalues of a Hermitian matrix, ascending.
    pub fn hermitian_eigenvalues(&self) -> Result<Vec<f64>> {
        if self.nrows != self.ncols {
            return Err(Error::DimensionMismatch(
                "eigenvalues of a non-square matrix".into(),
            ));
        }
        if self.nrows == 0 {
            return Ok(Vec::new());
        }
        let m = DMatrix::from_fn(self.nrows, self.ncols, |r, c| self.get(r, c));
        let eig = m.symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(vals)
    }
}

/// `A† v` without materializing the adjoint.
fn adjoint_matvec(a: &CMat, v: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); a.ncols()];
    for r in 0..a.nrows() {
        let row = a.row(r);
        let vr = v[r];
        for (o, x) in out.iter_mut().zip(row) {
            *o += x.conj() * vr;
        }
    }
    out
}

/// Normalize in place; returns the squared norm before normalization.
fn normalize(v: &mut [Complex64]) -> f64 {
    let nsq: f64 = v.iter().map(|x| x.norm_sqr()).sum();
    let n = nsq.sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    nsq
}

/// Spectral norm of an up-to-2×2 block in closed form (singular value of
/// the matrix `[[a,b],[c,d]]` via the exact 2×2 SVD formula).
pub fn block2_opnorm(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> f64 {
    let s = a.norm_sqr() + b.norm_sqr() + c.norm_sqr() + d.norm_sqr();
    // det(M†M) = |det M|².
    let det = (a * d - b * c).norm_sqr();
    // Eigenvalues of M†M: (s ± sqrt(s² − 4det))/2.
    let disc = (s * s - 4.0 * det).max(0.0).sqrt();
    (0.5 * (s + disc)).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_cmat(n: usize, rng: &mut ChaCha8Rng) -> CMat {
        let data = (0..n * n)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        CMat::from_rows(n, n, data).unwrap()
    }

    #[test]
    fn mul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cmat(7, &mut rng);
        let b = random_cmat(7, &mut rng);
        let ab = a.mul(&b).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let direct: Complex64 = (0..7).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((ab.get(i, j) - direct).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn invert_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 2, 5, 40] {
            let mut a = random_cmat(n, &mut rng);
            for i in 0..n {
                // Diagonal boost keeps the test matrices well conditioned.
                a.set(i, i, a.get(i, i) + c(4.0, 0.0));
            }
            let inv = a.invert().unwrap();
            let prod = a.mul(&inv).unwrap();
            let defect = prod.sub(&CMat::identity(n)).unwrap().max_abs();
            assert!(defect < 1e-10, "defect {defect:.3e} at n={n}");
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = CMat::zeros(3, 3);
        assert!(a.invert().is_err());
    }

    #[test]
    fn opnorm_of_diagonal() {
        // diag(3, -4i) has operator norm 4.
        let mut a = CMat::zeros(2, 2);
        a.set(0, 0, c(3.0, 0.0));
        a.set(1, 1, c(0.0, -4.0));
        assert!((a.opnorm() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn hermitian_eigenvalues_known() {
        // [[2, i], [-i, 2]] has eigenvalues {1, 3}.
        let mut a = CMat::zeros(2, 2);
        a.set(0, 0, c(2.0, 0.0));
        a.set(0, 1, c(0.0, 1.0));
        a.set(1, 0, c(0.0, -1.0));
        a.set(1, 1, c(2.0, 0.0));
        let ev = a.hermitian_eigenvalues().unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn block2_norm_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = random_cmat(2, &mut rng);
            let closed = block2_opnorm(m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1));
            assert!((closed - m.opnorm()).abs() < 1e-8);
        }
    }

    #[test]
    fn adjoint_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_cmat(6, &mut rng);
        assert_eq!(a.adjoint().adjoint(), a);
    }
}
