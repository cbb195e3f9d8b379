//! Matrices indexed by site sets and the weighted decay-norm calculus.
//!
//! For a matrix `M` indexed by finite site sets `C × B` the decay profile
//! collects, for every scalar offset `n = i − i′`, the largest spectral norm
//! of the (up to) 2×2 component block sitting at that offset:
//!
//! ```text
//! [M(n)] = max { |M_i^{i′}|  :  i − i′ = n },      |·| = 2×2 operator norm
//! ```
//!
//! and the `s`-norm is the weighted ℓ² functional
//!
//! ```text
//! ‖M‖_s² = K₀ · Σ_n [M(n)]² ⟨n⟩^{2s},   ⟨n⟩ = max(|n|_∞, 1).
//! ```
//!
//! The profile is independent of `s`, so it is computed once per matrix and
//! cached; every norm query is then a single weighted sum. A one-column
//! matrix reproduces the Sobolev norm of the corresponding coefficient
//! vector, which is what glues the matrix calculus to the function spaces.

use num_complex::Complex64;
use serde::Serialize;
use std::sync::{Arc, OnceLock};

use crate::lattice::{MultiIndex, Site, SiteSet};
use crate::linalg::{block2_opnorm, CMat};
use crate::{Error, Result};

/// Relative truncation threshold for the Neumann left-inverse series.
const NEUMANN_REL_TOL: f64 = 1e-14;
/// Term cap for the Neumann left-inverse series.
const NEUMANN_MAX_TERMS: usize = 200;
/// Entries below this magnitude count as structural zeros for support tests.
const SUPPORT_EPS: f64 = 1e-300;

/// Norm context: the frozen constants every `s`-norm computation needs.
///
/// `cs` holds the calibrated interpolation constant sampled on an `s`-grid;
/// lookups between samples take the larger neighbouring value so the bound
/// stays conservative.
#[derive(Clone, Debug, Serialize)]
pub struct NormContext {
    /// Scalar lattice dimension `b = ν + d`.
    pub b: usize,
    /// Low regularity index `s₀`.
    pub s0: f64,
    /// Weight constant `K₀` of the norm.
    pub k0: f64,
    /// Line-decay constant `K₁ = (Σ ⟨n⟩^{−2b})^{1/2}` over the frozen range.
    pub k1: f64,
    /// Calibrated interpolation constants as `(s, C(s))` samples, ascending.
    pub cs: Vec<(f64, f64)>,
}

impl NormContext {
    /// Interpolation constant at `s`; 1 at and below `s₀`, conservative
    /// neighbour maximum between calibration samples, last sample beyond.
    pub fn cs(&self, s: f64) -> f64 {
        if s <= self.s0 || self.cs.is_empty() {
            return 1.0;
        }
        let mut below = 1.0f64;
        for &(sv, cv) in &self.cs {
            if sv >= s {
                return below.max(cv).max(1.0);
            }
            below = cv;
        }
        below.max(1.0)
    }
}

/// Cached decay profile of a site matrix.
#[derive(Clone, Debug)]
pub struct DecayProfile {
    b: usize,
    lo: Vec<i64>,
    extent: Vec<usize>,
    values: Vec<f64>,
}

impl DecayProfile {
    fn flat_index(&self, n: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (dim, &nd) in n.iter().enumerate() {
            let off = nd - self.lo[dim];
            if off < 0 || off as usize >= self.extent[dim] {
                return None;
            }
            idx = idx * self.extent[dim] + off as usize;
        }
        Some(idx)
    }

    /// `[M(n)]` for one offset; 0 outside the stored range.
    pub fn value(&self, n: &[i64]) -> f64 {
        debug_assert_eq!(n.len(), self.b);
        self.flat_index(n).map_or(0.0, |i| self.values[i])
    }

    /// Iterate `(offset, [M(n)])` over nonzero profile entries.
    pub fn entries(&self) -> impl Iterator<Item = (Vec<i64>, f64)> + '_ {
        let b = self.b;
        self.values.iter().enumerate().filter_map(move |(flat, &v)| {
            if v == 0.0 {
                return None;
            }
            let mut n = vec![0i64; b];
            let mut rem = flat;
            for dim in (0..b).rev() {
                let e = self.extent[dim];
                n[dim] = self.lo[dim] + (rem % e) as i64;
                rem /= e;
            }
            Some((n, v))
        })
    }

    /// Weighted norm `(K₀ Σ [M(n)]² ⟨n⟩^{2s})^{1/2}`.
    pub fn snorm(&self, s: f64, k0: f64) -> f64 {
        let mut total = 0.0f64;
        for (n, v) in self.entries() {
            let ang = n.iter().map(|x| x.abs()).max().unwrap_or(0).max(1) as f64;
            total += v * v * ang.powf(2.0 * s);
        }
        (k0 * total).sqrt()
    }

    /// Largest offset sup-norm carrying a nonzero profile value.
    pub fn max_offset(&self) -> i64 {
        self.entries()
            .map(|(n, _)| n.iter().map(|x| x.abs()).max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    /// Smallest offset sup-norm carrying a nonzero profile value.
    pub fn min_offset(&self) -> i64 {
        self.entries()
            .map(|(n, _)| n.iter().map(|x| x.abs()).max().unwrap_or(0))
            .min()
            .unwrap_or(0)
    }
}

/// Dense matrix indexed by canonical site sets.
#[derive(Clone, Debug)]
pub struct SiteMatrix {
    rows: Arc<SiteSet>,
    cols: Arc<SiteSet>,
    mat: CMat,
    profile: OnceLock<DecayProfile>,
}

/// Site sets match when they are the same allocation or element-wise equal.
pub fn sets_match(a: &Arc<SiteSet>, b: &Arc<SiteSet>) -> bool {
    Arc::ptr_eq(a, b) || a.sites() == b.sites()
}

impl SiteMatrix {
    pub fn new(rows: Arc<SiteSet>, cols: Arc<SiteSet>, mat: CMat) -> Result<Self> {
        if mat.nrows() != rows.len() || mat.ncols() != cols.len() {
            return Err(Error::DimensionMismatch(format!(
                "matrix {}×{} over site sets {}×{}",
                mat.nrows(),
                mat.ncols(),
                rows.len(),
                cols.len()
            )));
        }
        if rows.dims() != cols.dims() {
            return Err(Error::DimensionMismatch(
                "row and column site sets live on different lattices".into(),
            ));
        }
        Ok(SiteMatrix {
            rows,
            cols,
            mat,
            profile: OnceLock::new(),
        })
    }

    pub fn zeros(rows: Arc<SiteSet>, cols: Arc<SiteSet>) -> Result<Self> {
        let m = CMat::zeros(rows.len(), cols.len());
        SiteMatrix::new(rows, cols, m)
    }

    pub fn identity(set: Arc<SiteSet>) -> Self {
        let m = CMat::identity(set.len());
        SiteMatrix::new(set.clone(), set, m).expect("square by construction")
    }

    pub fn rows(&self) -> &Arc<SiteSet> {
        &self.rows
    }

    pub fn cols(&self) -> &Arc<SiteSet> {
        &self.cols
    }

    pub fn mat(&self) -> &CMat {
        &self.mat
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.mat.get(r, c)
    }

    /// Entry addressed by sites; error when either site is absent.
    pub fn get_site(&self, k: &Site, kp: &Site) -> Result<Complex64> {
        let r = self
            .rows
            .position(k)
            .ok_or_else(|| Error::InvalidArgument("row site not in index set".into()))?;
        let c = self
            .cols
            .position(kp)
            .ok_or_else(|| Error::InvalidArgument("column site not in index set".into()))?;
        Ok(self.mat.get(r, c))
    }

    pub fn mul(&self, rhs: &SiteMatrix) -> Result<SiteMatrix> {
        if !sets_match(&self.cols, &rhs.rows) {
            return Err(Error::DimensionMismatch(
                "inner site sets do not match in product".into(),
            ));
        }
        SiteMatrix::new(self.rows.clone(), rhs.cols.clone(), self.mat.mul(&rhs.mat)?)
    }

    pub fn add(&self, rhs: &SiteMatrix) -> Result<SiteMatrix> {
        self.check_same_shape(rhs)?;
        SiteMatrix::new(self.rows.clone(), self.cols.clone(), self.mat.add(&rhs.mat)?)
    }

    pub fn sub(&self, rhs: &SiteMatrix) -> Result<SiteMatrix> {
        self.check_same_shape(rhs)?;
        SiteMatrix::new(self.rows.clone(), self.cols.clone(), self.mat.sub(&rhs.mat)?)
    }

    pub fn neg(&self) -> SiteMatrix {
        SiteMatrix::new(self.rows.clone(), self.cols.clone(), self.mat.neg())
            .expect("shape preserved")
    }

    pub fn scale(&self, c: Complex64) -> SiteMatrix {
        SiteMatrix::new(self.rows.clone(), self.cols.clone(), self.mat.scale(c))
            .expect("shape preserved")
    }

    fn check_same_shape(&self, rhs: &SiteMatrix) -> Result<()> {
        if !sets_match(&self.rows, &rhs.rows) || !sets_match(&self.cols, &rhs.cols) {
            return Err(Error::DimensionMismatch(
                "site sets do not match for entrywise operation".into(),
            ));
        }
        Ok(())
    }

    /// Dense inverse (square over identical row/column sets).
    pub fn invert(&self) -> Result<SiteMatrix> {
        if !sets_match(&self.rows, &self.cols) {
            return Err(Error::DimensionMismatch(
                "inverse requires identical row and column site sets".into(),
            ));
        }
        SiteMatrix::new(self.cols.clone(), self.rows.clone(), self.mat.invert()?)
    }

    /// Submatrix over subsets of the index sets.
    pub fn restrict(&self, rows: &Arc<SiteSet>, cols: &Arc<SiteSet>) -> Result<SiteMatrix> {
        let rpos: Vec<usize> = rows
            .sites()
            .iter()
            .map(|s| {
                self.rows
                    .position(s)
                    .ok_or_else(|| Error::InvalidArgument("row subset site not in matrix".into()))
            })
            .collect::<Result<_>>()?;
        let cpos: Vec<usize> = cols
            .sites()
            .iter()
            .map(|s| {
                self.cols
                    .position(s)
                    .ok_or_else(|| Error::InvalidArgument("column subset site not in matrix".into()))
            })
            .collect::<Result<_>>()?;
        let mut m = CMat::zeros(rpos.len(), cpos.len());
        for (ri, &r) in rpos.iter().enumerate() {
            for (ci, &c) in cpos.iter().enumerate() {
                m.set(ri, ci, self.mat.get(r, c));
            }
        }
        SiteMatrix::new(rows.clone(), cols.clone(), m)
    }

    /// Add `sub`'s entries into the corresponding positions of `self`,
    /// returning the result (used to scatter cluster-localized pieces back
    /// into a full-box matrix).
    pub fn scatter_add(&self, sub: &SiteMatrix) -> Result<SiteMatrix> {
        let mut m = self.mat.clone();
        for (ri, k) in sub.rows.sites().iter().enumerate() {
            let r = self
                .rows
                .position(k)
                .ok_or_else(|| Error::InvalidArgument("scatter row site not in target".into()))?;
            for (ci, kp) in sub.cols.sites().iter().enumerate() {
                let c = self.cols.position(kp).ok_or_else(|| {
                    Error::InvalidArgument("scatter column site not in target".into())
                })?;
                m.set(r, c, m.get(r, c) + sub.mat.get(ri, ci));
            }
        }
        SiteMatrix::new(self.rows.clone(), self.cols.clone(), m)
    }

    /// Decay profile (computed once, then cached).
    pub fn profile(&self) -> &DecayProfile {
        self.profile.get_or_init(|| self.compute_profile())
    }

    fn compute_profile(&self) -> DecayProfile {
        let b = self.rows.dims().b();
        let rg = self.rows.spatial_groups();
        let cg = self.cols.spatial_groups();
        // Offset bounding box from per-dimension coordinate ranges.
        let coord = |i: &MultiIndex, dim: usize| -> i64 {
            if dim < i.l.len() {
                i.l[dim]
            } else {
                i.j[dim - i.l.len()]
            }
        };
        let mut lo = vec![0i64; b];
        let mut hi = vec![0i64; b];
        if !rg.is_empty() && !cg.is_empty() {
            for dim in 0..b {
                let rmin = rg.iter().map(|(i, _)| coord(i, dim)).min().unwrap();
                let rmax = rg.iter().map(|(i, _)| coord(i, dim)).max().unwrap();
                let cmin = cg.iter().map(|(i, _)| coord(i, dim)).min().unwrap();
                let cmax = cg.iter().map(|(i, _)| coord(i, dim)).max().unwrap();
                lo[dim] = rmin - cmax;
                hi[dim] = rmax - cmin;
            }
        }
        let extent: Vec<usize> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| (h - l + 1).max(1) as usize)
            .collect();
        let total: usize = extent.iter().product();
        let mut values = vec![0.0f64; total.max(1)];
        let zero = Complex64::new(0.0, 0.0);
        let mut n = vec![0i64; b];
        for (ri, rslots) in rg {
            for (ci, cslots) in cg {
                for dim in 0..b {
                    n[dim] = coord(ri, dim) - coord(ci, dim);
                }
                let e = |ro: Option<usize>, co: Option<usize>| match (ro, co) {
                    (Some(r), Some(c)) => self.mat.get(r, c),
                    _ => zero,
                };
                let v = block2_opnorm(
                    e(rslots[0], cslots[0]),
                    e(rslots[0], cslots[1]),
                    e(rslots[1], cslots[0]),
                    e(rslots[1], cslots[1]),
                );
                // Flat index of n.
                let mut idx = 0usize;
                for dim in 0..b {
                    idx = idx * extent[dim] + (n[dim] - lo[dim]) as usize;
                }
                if v > values[idx] {
                    values[idx] = v;
                }
            }
        }
        DecayProfile {
            b,
            lo,
            extent,
            values,
        }
    }

    /// Decay norm `‖M‖_s`.
    pub fn snorm(&self, s: f64, ctx: &NormContext) -> f64 {
        self.profile().snorm(s, ctx.k0)
    }

    /// L² operator norm (largest singular value).
    pub fn l2_opnorm(&self) -> f64 {
        self.mat.opnorm()
    }

    /// Largest line norm `max_i ‖M_{{i}}‖_{s}` where `M_{{i}}` keeps the
    /// two rows with scalar index `i`.
    pub fn line_snorm_max(&self, s: f64, k0: f64) -> f64 {
        let rg = self.rows.spatial_groups();
        let cg = self.cols.spatial_groups();
        let zero = Complex64::new(0.0, 0.0);
        let mut worst = 0.0f64;
        for (ri, rslots) in rg {
            let mut total = 0.0f64;
            for (ci, cslots) in cg {
                let e = |ro: Option<usize>, co: Option<usize>| match (ro, co) {
                    (Some(r), Some(c)) => self.mat.get(r, c),
                    _ => zero,
                };
                let v = block2_opnorm(
                    e(rslots[0], cslots[0]),
                    e(rslots[0], cslots[1]),
                    e(rslots[1], cslots[0]),
                    e(rslots[1], cslots[1]),
                );
                let ang = ri.distance(ci).max(1) as f64;
                total += v * v * ang.powf(2.0 * s);
            }
            worst = worst.max((k0 * total).sqrt());
        }
        worst
    }
}

/// One-column site matrix holding a coefficient vector, so that vector
/// Sobolev norms are the `s`-norms of the column.
pub fn column_matrix(rows: Arc<SiteSet>, values: &[Complex64]) -> Result<SiteMatrix> {
    if values.len() != rows.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values over {} sites",
            values.len(),
            rows.len()
        )));
    }
    let dims = rows.dims();
    let origin = Arc::new(SiteSet::from_sites(
        dims,
        vec![Site::new(MultiIndex::zero(dims), 0)],
    )?);
    let mut m = CMat::zeros(rows.len(), 1);
    for (r, &v) in values.iter().enumerate() {
        m.set(r, 0, v);
    }
    SiteMatrix::new(rows, origin, m)
}

/// Witness record for one interpolation-inequality evaluation.
#[derive(Clone, Debug, Serialize)]
pub struct InterpolationWitness {
    pub s: f64,
    pub cs: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub m1_s0: f64,
    pub m1_s: f64,
    pub m2_s0: f64,
    pub m2_s: f64,
    pub holds: bool,
}

/// Evaluate `‖M₁M₂‖_s ≤ ½‖M₁‖_{s₀}‖M₂‖_s + (C(s)/2)‖M₁‖_s‖M₂‖_{s₀}`
/// with the calibrated constant, returning all measured quantities.
pub fn interpolation_check(m1: &SiteMatrix, m2: &SiteMatrix, s: f64, ctx: &NormContext) -> Result<InterpolationWitness> {
    let prod = m1.mul(m2)?;
    let cs = ctx.cs(s);
    let m1_s0 = m1.snorm(ctx.s0, ctx);
    let m1_s = m1.snorm(s, ctx);
    let m2_s0 = m2.snorm(ctx.s0, ctx);
    let m2_s = m2.snorm(s, ctx);
    let lhs = prod.snorm(s, ctx);
    let rhs = 0.5 * m1_s0 * m2_s + 0.5 * cs * m1_s * m2_s0;
    Ok(InterpolationWitness {
        s,
        cs,
        lhs,
        rhs,
        m1_s0,
        m1_s,
        m2_s0,
        m2_s,
        holds: lhs <= rhs * (1.0 + 1e-12) + 1e-300,
    })
}

/// Which support pattern a smoothing bound applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SupportCase {
    /// All entries at offsets `|i − i′| < N` vanish (far off-diagonal part):
    /// projecting up in `s` loses a factor `N^{−(s′−s)}`.
    OffDiagonal,
    /// All entries at offsets `|i − i′| > N` vanish (banded part): the high
    /// norm is controlled by `N^{s′−s}` times the low norm.
    Banded,
}

/// Measured smoothing inequality for the applicable support case.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothingReport {
    pub case: SupportCase,
    pub n: i64,
    pub s: f64,
    pub sp: f64,
    /// Left-hand side of the applicable inequality.
    pub lhs: f64,
    /// Right-hand side (bound).
    pub rhs: f64,
    pub holds: bool,
}

/// Smoothing bounds for matrices with constrained offset support.
///
/// Requires `s ≤ s′`. Determines which support case applies (preferring the
/// off-diagonal case when both hold, e.g. for the zero matrix) and checks:
///
/// * off-diagonal (`[M(n)] = 0` for `|n| < N`): `‖M‖_s ≤ N^{−(s′−s)}‖M‖_{s′}`,
/// * banded (`[M(n)] = 0` for `|n| > N`): `‖M‖_{s′} ≤ N^{s′−s}‖M‖_s`.
pub fn smoothing_bounds(m: &SiteMatrix, n: i64, s: f64, sp: f64, ctx: &NormContext) -> Result<SmoothingReport> {
    if s > sp {
        return Err(Error::InvalidArgument(format!(
            "smoothing bounds need s ≤ s′ (got {s} > {sp})"
        )));
    }
    if n < 1 {
        return Err(Error::InvalidArgument(format!("support radius {n} < 1")));
    }
    let profile = m.profile();
    let mut has_inner = false;
    let mut has_outer = false;
    for (off, v) in profile.entries() {
        if v <= SUPPORT_EPS {
            continue;
        }
        let mag = off.iter().map(|x| x.abs()).max().unwrap_or(0);
        if mag < n {
            has_inner = true;
        }
        if mag > n {
            has_outer = true;
        }
    }
    let nf = n as f64;
    if !has_inner {
        let lhs = m.snorm(s, ctx);
        let rhs = nf.powf(-(sp - s)) * m.snorm(sp, ctx);
        return Ok(SmoothingReport {
            case: SupportCase::OffDiagonal,
            n,
            s,
            sp,
            lhs,
            rhs,
            holds: lhs <= rhs * (1.0 + 1e-12),
        });
    }
    if !has_outer {
        let lhs = m.snorm(sp, ctx);
        let rhs = nf.powf(sp - s) * m.snorm(s, ctx);
        return Ok(SmoothingReport {
            case: SupportCase::Banded,
            n,
            s,
            sp,
            lhs,
            rhs,
            holds: lhs <= rhs * (1.0 + 1e-12),
        });
    }
    Err(Error::SupportCondition(format!(
        "matrix has nonzero offsets both below and above {n}"
    )))
}

/// Measured decay-along-lines bound `‖M‖_s ≤ K₁ max_i ‖M_{{i}}‖_{s+b}`.
#[derive(Clone, Debug, Serialize)]
pub struct LineDecayReport {
    pub s: f64,
    pub k1: f64,
    pub line_max: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn line_decay_bound(m: &SiteMatrix, s: f64, ctx: &NormContext) -> LineDecayReport {
    let b = ctx.b as f64;
    let line_max = m.line_snorm_max(s + b, ctx.k0);
    let lhs = m.snorm(s, ctx);
    let rhs = ctx.k1 * line_max;
    LineDecayReport {
        s,
        k1: ctx.k1,
        line_max,
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-12) + 1e-300,
    }
}

/// Result of the perturbed left-inverse construction.
#[derive(Debug)]
pub struct LeftInverseReport {
    /// The left inverse `N_P = (I + N·P)⁻¹ N` of `M + P`.
    pub n_p: SiteMatrix,
    /// Terms of the Neumann series actually summed.
    pub terms: usize,
    /// `‖N‖_{s₀}` of the unperturbed left inverse.
    pub n_s0: f64,
    /// `‖P‖_{s₀}` of the perturbation.
    pub p_s0: f64,
    /// Measured `‖N_P‖` per requested `s`, with the guaranteed bound
    /// (`2‖N‖_{s₀}` at `s₀`; `C(s)(‖N‖_s + ‖N‖²_{s₀}‖P‖_s)` above).
    pub norms: Vec<(f64, f64, f64)>,
}

/// Left inverse of a perturbed matrix via the Neumann series
/// `N_P = Σ_p (−1)^p (N·P)^p N`, valid when `‖N‖_{s₀}‖P‖_{s₀} ≤ 1/2`.
///
/// `n_inv` is a left inverse of the unperturbed matrix (`N·M = I`); the
/// returned matrix satisfies `N_P·(M + P) = I`. The series is truncated at
/// relative term size `1e-14` (or 200 terms).
pub fn left_inverse_perturbed(
    n_inv: &SiteMatrix,
    p: &SiteMatrix,
    s_list: &[f64],
    ctx: &NormContext,
) -> Result<LeftInverseReport> {
    if !sets_match(n_inv.cols(), p.rows()) || !sets_match(p.cols(), n_inv.rows()) {
        return Err(Error::DimensionMismatch(
            "left inverse and perturbation have incompatible site sets".into(),
        ));
    }
    let n_s0 = n_inv.snorm(ctx.s0, ctx);
    let p_s0 = p.snorm(ctx.s0, ctx);
    if n_s0 * p_s0 > 0.5 {
        return Err(Error::HypothesisViolated(format!(
            "‖N‖_s0·‖P‖_s0 = {:.6e} > 1/2 (‖N‖_s0 = {:.6e}, ‖P‖_s0 = {:.6e})",
            n_s0 * p_s0,
            n_s0,
            p_s0
        )));
    }
    let np = n_inv.mul(p)?;
    let mut acc = n_inv.clone();
    let mut term = n_inv.clone();
    let mut terms = 1usize;
    while terms < NEUMANN_MAX_TERMS {
        term = np.mul(&term)?.neg();
        acc = acc.add(&term)?;
        terms += 1;
        if term.snorm(ctx.s0, ctx) <= NEUMANN_REL_TOL * n_s0 {
            break;
        }
    }
    let norms = s_list
        .iter()
        .map(|&s| {
            let measured = acc.snorm(s, ctx);
            let bound = if (s - ctx.s0).abs() < 1e-12 {
                2.0 * n_s0
            } else {
                ctx.cs(s) * (n_inv.snorm(s, ctx) + n_s0 * n_s0 * p.snorm(s, ctx))
            };
            (s, measured, bound)
        })
        .collect();
    Ok(LeftInverseReport {
        n_p: acc,
        terms,
        n_s0,
        p_s0,
        norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{box_sites, Dims};

    fn ctx() -> NormContext {
        NormContext {
            b: 2,
            s0: 2.0,
            k0: 1.0,
            k1: 1.0,
            cs: vec![(2.0, 1.0), (5.0, 2.0)],
        }
    }

    fn origin_box(n: i64) -> Arc<SiteSet> {
        let dims = Dims::new(1, 1);
        Arc::new(box_sites(dims, &MultiIndex::zero(dims), n).unwrap())
    }

    /// Matrix with a single scalar entry at a prescribed site pair.
    fn delta_matrix(set: &Arc<SiteSet>, k: &Site, kp: &Site, v: Complex64) -> SiteMatrix {
        let mut m = CMat::zeros(set.len(), set.len());
        m.set(set.position(k).unwrap(), set.position(kp).unwrap(), v);
        SiteMatrix::new(set.clone(), set.clone(), m).unwrap()
    }

    fn site(l: i64, j: i64, a: u8) -> Site {
        Site::new(MultiIndex::new(vec![l], vec![j]), a)
    }

    #[test]
    fn single_offset_block_norm() {
        // One block of operator norm 2 at offset sup-norm 3, K0 = 1:
        // ‖M‖_s = 2·3^s.
        let set = origin_box(3);
        let m = delta_matrix(&set, &site(3, 0, 0), &site(0, 0, 0), Complex64::new(2.0, 0.0));
        let c = ctx();
        for s in [0.0, 1.0, 2.0, 3.5] {
            let expect = 2.0 * 3f64.powf(s);
            assert!((m.snorm(s, &c) - expect).abs() < 1e-12 * expect.max(1.0));
        }
    }

    #[test]
    fn snorm_monotone_in_s() {
        let set = origin_box(2);
        let c = ctx();
        let mut mat = CMat::zeros(set.len(), set.len());
        for r in 0..set.len() {
            for cc in 0..set.len() {
                let d = crate::lattice::sup_distance(set.site(r), set.site(cc)) as f64;
                mat.set(r, cc, Complex64::new(1.0 / (1.0 + d * d * d), 0.02 * d));
            }
        }
        let m = SiteMatrix::new(set.clone(), set, mat).unwrap();
        let mut last = 0.0;
        for s in [0.0, 0.5, 1.0, 2.0, 3.0] {
            let v = m.snorm(s, &c);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn l2_norm_dominated_by_s0_norm() {
        // ‖M‖₀(op) ≤ ‖M‖_{s0} for K0 ≥ the offset tail sum (here generous).
        let set = origin_box(2);
        let c = NormContext { k0: 16.0, ..ctx() };
        let mut mat = CMat::zeros(set.len(), set.len());
        for r in 0..set.len() {
            for cc in 0..set.len() {
                let d = crate::lattice::sup_distance(set.site(r), set.site(cc)) as f64;
                mat.set(r, cc, Complex64::new((-(d)).exp(), 0.0));
            }
        }
        let m = SiteMatrix::new(set.clone(), set, mat).unwrap();
        assert!(m.l2_opnorm() <= m.snorm(c.s0, &c) + 1e-10);
    }

    #[test]
    fn vector_norm_is_column_snorm() {
        let set = origin_box(2);
        let c = ctx();
        let vals: Vec<Complex64> = (0..set.len())
            .map(|r| Complex64::new(0.3 + r as f64 * 0.01, -0.2))
            .collect();
        let w = column_matrix(set.clone(), &vals).unwrap();
        // Direct Sobolev sum over sites (both components share the weight).
        let s = 2.5;
        let mut direct = 0.0;
        for (r, v) in vals.iter().enumerate() {
            let ang = set.site(r).i.angle() as f64;
            direct += v.norm_sqr() * ang.powf(2.0 * s);
        }
        let direct = (c.k0 * direct).sqrt();
        assert!((w.snorm(s, &c) - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn smoothing_cases() {
        let set = origin_box(3);
        let c = ctx();
        // Off-diagonal support: single entry at offset 3, N = 2.
        let far = delta_matrix(&set, &site(3, 0, 0), &site(0, 0, 0), Complex64::new(1.0, 0.0));
        let rep = smoothing_bounds(&far, 2, 2.0, 4.0, &c).unwrap();
        assert_eq!(rep.case, SupportCase::OffDiagonal);
        assert!(rep.holds);
        // Banded support: diagonal matrix, N = 1.
        let band = SiteMatrix::identity(set.clone());
        let rep = smoothing_bounds(&band, 1, 2.0, 4.0, &c).unwrap();
        assert_eq!(rep.case, SupportCase::Banded);
        assert!(rep.holds);
        // Mixed support errors.
        let mixed = far.add(&band).unwrap();
        assert!(smoothing_bounds(&mixed, 2, 2.0, 4.0, &c).is_err());
    }

    #[test]
    fn neumann_left_inverse_small_perturbation() {
        let set = origin_box(1);
        let c = ctx();
        let n = set.len();
        let mut base = CMat::zeros(n, n);
        for i in 0..n {
            base.set(i, i, Complex64::new(2.0 + i as f64 * 0.1, 0.0));
        }
        let m = SiteMatrix::new(set.clone(), set.clone(), base).unwrap();
        let minv = m.invert().unwrap();
        let mut pm = CMat::zeros(n, n);
        for i in 0..n {
            for jj in 0..n {
                let d = crate::lattice::sup_distance(set.site(i), set.site(jj)) as f64;
                pm.set(i, jj, Complex64::new(0.01 / (1.0 + d), 0.005));
            }
        }
        let p = SiteMatrix::new(set.clone(), set.clone(), pm).unwrap();
        let rep = left_inverse_perturbed(&minv, &p, &[2.0, 4.0], &c).unwrap();
        // N_P (M + P) = I.
        let prod = rep.n_p.mul(&m.add(&p).unwrap()).unwrap();
        let defect = prod
            .sub(&SiteMatrix::identity(set.clone()))
            .unwrap()
            .mat()
            .max_abs();
        assert!(defect < 1e-11, "identity defect {defect:.3e}");
        // ‖N_P‖_{s0} ≤ 2‖N‖_{s0}.
        assert!(rep.n_p.snorm(c.s0, &c) <= 2.0 * rep.n_s0 + 1e-12);
    }

    #[test]
    fn neumann_hypothesis_refused() {
        let set = origin_box(1);
        let c = ctx();
        let m = SiteMatrix::identity(set.clone());
        let p = m.scale(Complex64::new(10.0, 0.0));
        assert!(matches!(
            left_inverse_perturbed(&m, &p, &[2.0], &c),
            Err(Error::HypothesisViolated(_))
        ));
    }

    #[test]
    fn restrict_and_scatter_roundtrip() {
        let set = origin_box(2);
        let inner = Arc::new(
            set.filter(|s| s.i.sup_norm() <= 1)
                .unwrap(),
        );
        let mut mat = CMat::zeros(set.len(), set.len());
        for r in 0..set.len() {
            mat.set(r, r, Complex64::new(r as f64 + 1.0, 0.0));
        }
        let m = SiteMatrix::new(set.clone(), set.clone(), mat).unwrap();
        let sub = m.restrict(&inner, &inner).unwrap();
        assert_eq!(sub.mat().nrows(), inner.len());
        let back = SiteMatrix::zeros(set.clone(), set.clone())
            .unwrap()
            .scatter_add(&sub)
            .unwrap();
        for (r, k) in inner.sites().iter().enumerate() {
            assert_eq!(back.get_site(k, k).unwrap(), sub.get(r, r));
        }
    }
}
