//! Eigenvalue-based parameter classification.
//!
//! For a spatial center `j₀` the box operator `A_{N,j₀}(ε, λ, θ)` lives on
//! the sites `|l|∞ ≤ N`, `|j − j₀|∞ ≤ N` (both components). Its θ-bad set
//! is the set of `θ` where the smallest eigenvalue modulus drops below a
//! threshold `~N^{−τ}`. Because the θ-dependence is through `θ·Y` with
//! `‖Y‖₀ = 1`, every eigenvalue branch is 1-Lipschitz in `θ`, which makes
//! a certified adaptive scan cheap: a sample with margin `g` above the
//! threshold certifies the whole interval of radius `g − threshold`.
//!
//! On top of the scan sit the covering/complexity counts, the per-parameter
//! weak-goodness classification, the `L²`-inverse gate, the (ε, λ) sweep
//! with its measure-scaling slope, and the first-Melnikov λ-set.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

use crate::lattice::{box_sites, MultiIndex, SiteSet};
use crate::linalg::CMat;
use crate::nls::OperatorAssembly;
use crate::{Error, Result};

/// Radius coefficient of the θ-scan interval `I_N = (−11dN², 11dN²)`.
pub const SCAN_MARGIN: f64 = 11.0;
/// Hermiticity residual tolerance (times the matrix scale).
const HERMITIAN_TOL: f64 = 1e-12;
/// Hard cap on scan samples (refusal, not truncation, beyond it).
const MAX_SCAN_SAMPLES: usize = 2_000_000;
/// Largest box handled by the dense eigenvalue fallback.
const DENSE_BOX_LIMIT: usize = 1600;

/// θ-scan interval for spatial dimension `d` at scale `n`.
pub fn theta_scan_interval(d: usize, n: i64) -> (f64, f64) {
    let r = SCAN_MARGIN * d as f64 * (n * n) as f64;
    (-r, r)
}

/// Sites `|l|∞ ≤ n`, `|j − j₀|∞ ≤ n`, both components.
pub fn parameter_box(asm: &OperatorAssembly, j0: &[i64], n: i64) -> Result<Arc<SiteSet>> {
    if j0.len() != asm.dims.d {
        return Err(Error::DimensionMismatch(format!(
            "center {:?} in spatial dimension {}",
            j0, asm.dims.d
        )));
    }
    let center = MultiIndex::new(vec![0; asm.dims.nu], j0.to_vec());
    Ok(Arc::new(box_sites(asm.dims, &center, n)?))
}

/// Disjoint sorted covering of the θ-bad set of one box operator.
#[derive(Clone, Debug, Serialize)]
pub struct ThetaBadSet {
    pub j0: Vec<i64>,
    pub n: i64,
    pub tau: f64,
    /// Level below which a minimal eigenvalue modulus counts as bad. For a
    /// widened (ε-perturbed closed-form) covering this includes the Weyl
    /// slack, so the set covers the nominal level set.
    pub threshold: f64,
    /// Sampling resolution of the scan (0 for exact closed-form sets).
    pub resolution: f64,
    pub intervals: Vec<(f64, f64)>,
    /// Number of eigenvalue evaluations spent.
    pub samples: usize,
}

impl ThetaBadSet {
    pub fn total_measure(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, theta: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| a <= theta && theta <= b)
    }

    /// Sup-distance from `theta` to the covered set (0 inside).
    pub fn distance(&self, theta: f64) -> f64 {
        self.intervals
            .iter()
            .map(|&(a, b)| {
                if theta < a {
                    a - theta
                } else if theta > b {
                    theta - b
                } else {
                    0.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Merge overlapping / nearly touching (gap ≤ `gap`) intervals.
fn merge_intervals(mut v: Vec<(f64, f64)>, gap: f64) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a - last.1 <= gap => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// True when the Töplitz coefficients of `T₁` only couple equal time
/// indices, so the box operator is block-diagonal over the time fibers.
pub fn time_block_diagonal(asm: &OperatorAssembly) -> bool {
    asm.p
        .keys()
        .chain(asm.q.keys())
        .all(|off| off.l.iter().all(|&l| l == 0))
}

enum Engine {
    /// `ε = 0`: eigenvalues are `μ̃_k ∓ (λω̄·l + θ)` in closed form. A
    /// nonzero `widen` turns the minimum modulus into a certified lower
    /// bound for an ε-perturbed operator (Weyl slack).
    ClosedForm { mu: Vec<f64>, widen: f64 },
    /// Time-block-diagonal with `ε ≠ 0`: one Hermitian eigensolve per
    /// fiber, `base − (λω̄·l + θ)J` with `J = diag(±1)`.
    Fiber { base: CMat, signs: Vec<f64> },
    /// Dense assembly of the whole box per sample.
    Dense,
}

/// Spectral access to one box operator `A_{N,j₀}(ε, λ, ·)` with the cheapest
/// valid evaluation path chosen at construction.
pub struct BoxSpectrum<'a> {
    asm: &'a OperatorAssembly,
    pub eps: f64,
    pub lambda: f64,
    pub j0: Vec<i64>,
    pub n: i64,
    set: Arc<SiteSet>,
    /// `λω̄·l` over all `|l|∞ ≤ n`.
    omega_l: Vec<f64>,
    engine: Engine,
}

fn omega_l_values(omega: &[f64], lambda: f64, n: i64) -> Vec<f64> {
    let mut vals = vec![0.0f64];
    for w in omega {
        let mut next = Vec::with_capacity(vals.len() * (2 * n + 1) as usize);
        for v in &vals {
            for l in -n..=n {
                next.push(v + lambda * w * l as f64);
            }
        }
        vals = next;
    }
    vals
}

fn check_hermitian(m: &CMat) -> Result<()> {
    let scale = m.max_abs().max(1.0);
    if m.hermitian_defect() > HERMITIAN_TOL * scale {
        return Err(Error::NumericalFailure(format!(
            "non-Hermitian matrix reached the eigenvalue solver (defect {:.3e})",
            m.hermitian_defect()
        )));
    }
    Ok(())
}

impl<'a> BoxSpectrum<'a> {
    /// Exact spectrum of the assembled box operator.
    pub fn exact(
        asm: &'a OperatorAssembly,
        eps: f64,
        lambda: f64,
        j0: &[i64],
        n: i64,
    ) -> Result<Self> {
        let set = parameter_box(asm, j0, n)?;
        let omega_l = omega_l_values(&asm.omega, lambda, n);
        let engine = if eps == 0.0 {
            Engine::ClosedForm {
                mu: asm.pot.spatial_block_eigs(j0, n),
                widen: 0.0,
            }
        } else if time_block_diagonal(asm) {
            let fiber = fiber_set(asm, j0, n)?;
            let base = asm.assemble(eps, lambda, 0.0, &fiber)?;
            check_hermitian(base.mat())?;
            let signs = fiber
                .sites()
                .iter()
                .map(|k| if k.a == 0 { 1.0 } else { -1.0 })
                .collect();
            Engine::Fiber {
                base: base.mat().clone(),
                signs,
            }
        } else {
            if set.len() > DENSE_BOX_LIMIT {
                return Err(Error::InvalidArgument(format!(
                    "dense eigenvalue path refused for a box of {} sites",
                    set.len()
                )));
            }
            Engine::Dense
        };
        Ok(BoxSpectrum {
            asm,
            eps,
            lambda,
            j0: j0.to_vec(),
            n,
            set,
            omega_l,
            engine,
        })
    }

    /// Closed-form spectrum of the `ε = 0` operator with the minimum
    /// modulus lowered by the Weyl slack `‖A(ε) − A(0)‖₀`, so that it
    /// certifies a lower bound for the ε-perturbed operator. Requires a
    /// time-block-diagonal assembly.
    pub fn widened(
        asm: &'a OperatorAssembly,
        eps: f64,
        lambda: f64,
        j0: &[i64],
        n: i64,
    ) -> Result<Self> {
        if !time_block_diagonal(asm) {
            return Err(Error::InvalidArgument(
                "widened spectrum needs a time-block-diagonal operator".into(),
            ));
        }
        let set = parameter_box(asm, j0, n)?;
        let widen = if eps == 0.0 {
            0.0
        } else {
            let fiber = fiber_set(asm, j0, n)?;
            let pert = asm.assemble(eps, lambda, 0.0, &fiber)?;
            let lin = asm.assemble(0.0, lambda, 0.0, &fiber)?;
            pert.mat().sub(lin.mat())?.opnorm()
        };
        Ok(BoxSpectrum {
            asm,
            eps,
            lambda,
            j0: j0.to_vec(),
            n,
            set,
            omega_l: omega_l_values(&asm.omega, lambda, n),
            engine: Engine::ClosedForm {
                mu: asm.pot.spatial_block_eigs(j0, n),
                widen,
            },
        })
    }

    /// Weyl slack of the widened path (0 on exact paths).
    pub fn widen(&self) -> f64 {
        match &self.engine {
            Engine::ClosedForm { widen, .. } => *widen,
            _ => 0.0,
        }
    }

    /// Smallest eigenvalue modulus of `A_{N,j₀}(ε, λ, θ)` (lower bound on
    /// the widened path). 1-Lipschitz in `θ` on every path.
    pub fn min_modulus(&self, theta: f64) -> Result<f64> {
        match &self.engine {
            Engine::ClosedForm { mu, widen } => {
                let mut best = f64::INFINITY;
                for &m in mu {
                    for &c in &self.omega_l {
                        best = best.min((m - (c + theta)).abs());
                        best = best.min((m + (c + theta)).abs());
                    }
                }
                Ok((best - widen).max(0.0))
            }
            Engine::Fiber { base, signs } => {
                let mut best = f64::INFINITY;
                for &c in &self.omega_l {
                    let mut m = base.clone();
                    let shift = c + theta;
                    for (r, s) in signs.iter().enumerate() {
                        m.set(r, r, m.get(r, r) - Complex64::new(s * shift, 0.0));
                    }
                    for e in m.hermitian_eigenvalues()? {
                        best = best.min(e.abs());
                    }
                }
                Ok(best)
            }
            Engine::Dense => {
                let a = self.asm.assemble(self.eps, self.lambda, theta, &self.set)?;
                check_hermitian(a.mat())?;
                let mut best = f64::INFINITY;
                for e in a.mat().hermitian_eigenvalues()? {
                    best = best.min(e.abs());
                }
                Ok(best)
            }
        }
    }

    /// Closed-form bad intervals `{θ : min modulus < threshold}` clipped to
    /// the scan interval. Only on the closed-form path.
    fn closed_intervals(&self, threshold: f64) -> Option<Vec<(f64, f64)>> {
        let Engine::ClosedForm { mu, widen } = &self.engine else {
            return None;
        };
        let (lo, hi) = theta_scan_interval(self.asm.dims.d, self.n);
        let half = threshold + widen;
        let mut raw = Vec::new();
        for &m in mu {
            for &c in &self.omega_l {
                for center in [m - c, -m - c] {
                    let (a, b) = (center - half, center + half);
                    if b > lo && a < hi {
                        raw.push((a.max(lo), b.min(hi)));
                    }
                }
            }
        }
        Some(merge_intervals(raw, 0.0))
    }
}

/// Single-fiber site set: `l = 0`, `|j − j₀|∞ ≤ n`, both components.
fn fiber_set(asm: &OperatorAssembly, j0: &[i64], n: i64) -> Result<Arc<SiteSet>> {
    let full = parameter_box(asm, j0, n)?;
    Ok(Arc::new(
        full.filter(|k| k.i.l.iter().all(|&l| l == 0))?,
    ))
}

/// Certified adaptive θ-scan at the given threshold and resolution.
fn adaptive_scan(
    spec: &BoxSpectrum,
    threshold: f64,
    resolution: f64,
) -> Result<(Vec<(f64, f64)>, usize)> {
    let (lo, hi) = theta_scan_interval(spec.asm.dims.d, spec.n);
    let mut theta = lo;
    let mut bad_points: Vec<f64> = Vec::new();
    let mut samples = 0usize;
    while theta <= hi {
        samples += 1;
        if samples > MAX_SCAN_SAMPLES {
            return Err(Error::NumericalFailure(
                "θ-scan sample budget exceeded".into(),
            ));
        }
        let g = spec.min_modulus(theta)?;
        if g < threshold {
            bad_points.push(theta);
            theta += resolution;
        } else {
            // The 1-Lipschitz bound certifies (θ, θ + (g − threshold)).
            theta += (g - threshold).max(resolution);
        }
    }
    // Runs of consecutive bad samples (spacing `resolution`) become
    // intervals, extended by half a step on each side.
    let mut intervals = Vec::new();
    let mut run: Option<(f64, f64)> = None;
    for &p in &bad_points {
        match run {
            Some((a, b)) if p - b <= 1.5 * resolution => run = Some((a, p)),
            Some((a, b)) => {
                intervals.push((a - 0.5 * resolution, b + 0.5 * resolution));
                run = Some((p, p));
            }
            None => run = Some((p, p)),
        }
    }
    if let Some((a, b)) = run {
        intervals.push((a - 0.5 * resolution, b + 0.5 * resolution));
    }
    Ok((merge_intervals(intervals, 0.0), samples))
}

/// θ-bad set of `A_{N,j₀}(ε, λ, ·)` at threshold `N^{−τ}` by the certified
/// adaptive scan over `I_N = (−11dN², 11dN²)`.
pub fn theta_bad_set(
    asm: &OperatorAssembly,
    eps: f64,
    lambda: f64,
    j0: &[i64],
    n: i64,
    tau: f64,
    resolution: f64,
) -> Result<ThetaBadSet> {
    let threshold = (n as f64).powf(-tau);
    if resolution > threshold / 4.0 {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution:.3e} coarser than N^(-tau)/4 = {:.3e}",
            threshold / 4.0
        )));
    }
    let spec = BoxSpectrum::exact(asm, eps, lambda, j0, n)?;
    let (intervals, samples) = adaptive_scan(&spec, threshold, resolution)?;
    Ok(ThetaBadSet {
        j0: j0.to_vec(),
        n,
        tau,
        threshold,
        resolution,
        intervals,
        samples,
    })
}

/// Closed-form θ-bad covering at level `level·N^{−τ}` (plus the ε-Weyl
/// slack on perturbed operators). Exact for `ε = 0`; a certified covering
/// otherwise. Requires a time-block-diagonal assembly when `ε ≠ 0`.
pub fn theta_bad_set_closed(
    asm: &OperatorAssembly,
    eps: f64,
    lambda: f64,
    j0: &[i64],
    n: i64,
    tau: f64,
    level: f64,
) -> Result<ThetaBadSet> {
    let base = level * (n as f64).powf(-tau);
    let spec = BoxSpectrum::widened(asm, eps, lambda, j0, n)?;
    let intervals = spec
        .closed_intervals(base)
        .expect("widened spectrum is closed-form");
    Ok(ThetaBadSet {
        j0: j0.to_vec(),
        n,
        tau,
        threshold: base + spec.widen(),
        resolution: 0.0,
        intervals,
        samples: 0,
    })
}

/// Refine the covering into pieces of length ≤ `N^{−τ}`; return the piece
/// count and the budget `2·measure·N^{τ}` computed from the set itself.
pub fn interval_complexity(bs: &ThetaBadSet, n: i64, tau: f64) -> (usize, f64) {
    let piece = (n as f64).powf(-tau);
    let count = bs
        .intervals
        .iter()
        .map(|&(a, b)| (((b - a) / piece - 1e-12).ceil() as usize).max(1))
        .sum();
    let bound = 2.0 * bs.total_measure() * (n as f64).powf(tau);
    (count, bound)
}

/// Per-center summary of the weak-goodness classification.
#[derive(Clone, Debug, Serialize)]
pub struct J0Summary {
    pub j0: Vec<i64>,
    pub interval_count: usize,
    pub measure: f64,
}

/// Verdict of `classify_parameter`.
#[derive(Clone, Debug, Serialize)]
pub struct ParameterClass {
    pub good_weak: bool,
    /// Complexity budget `N^{2d+ν+4}`.
    pub budget: f64,
    pub worst_j0: Vec<i64>,
    pub worst_count: usize,
    pub summaries: Vec<J0Summary>,
}

/// Smallest window radius (in `|j₀|∞`) outside which the θ-bad set over
/// `I_N` is empty: the box diagonal already exceeds every reachable shift.
pub fn required_j0_window(asm: &OperatorAssembly, eps: f64, lambda: f64, n: i64, tau: f64) -> i64 {
    let d = asm.dims.d;
    let vnorm1: f64 = asm.pot.v0_modes().map(|(_, c)| c.norm()).sum();
    let t1norm: f64 = eps
        * asm
            .p
            .values()
            .chain(asm.q.values())
            .map(|c| c.norm())
            .sum::<f64>()
        * 2.0;
    let omega_sum: f64 = asm.omega.iter().map(|w| w.abs()).sum();
    let reach = SCAN_MARGIN * d as f64 * (n * n) as f64
        + lambda.abs() * omega_sum * n as f64
        + 2.0 * (n as f64).powf(-tau)
        + vnorm1
        + t1norm
        - asm.pot.m;
    n + (reach.max(0.0).sqrt().ceil() as i64) + 1
}

/// Classify `(ε, λ)` as weakly `N`-good: every spatial center in the window
/// yields a θ-bad covering within the complexity budget (count ≤
/// `N^{2d+ν+4}`, pieces of length ≤ `N^{−τ}`), built from the level-
/// `2N^{−τ}` set. Centers beyond the required window are provably empty.
pub fn classify_parameter(
    asm: &OperatorAssembly,
    eps: f64,
    lambda: f64,
    n: i64,
    tau: f64,
    j0_window: Option<i64>,
) -> Result<ParameterClass> {
    let required = required_j0_window(asm, eps, lambda, n, tau);
    let radius = match j0_window {
        Some(w) if w < required => {
            return Err(Error::InvalidArgument(format!(
                "spatial window {w} below the required radius {required}"
            )))
        }
        Some(w) => w,
        None => required,
    };
    let d = asm.dims.d;
    // Odometer over j0 ∈ Z^d, |j0|∞ ≤ radius.
    let mut centers = vec![vec![0i64; 0]];
    for _ in 0..d {
        let mut next = Vec::new();
        for c in &centers {
            for v in -radius..=radius {
                let mut cc = c.clone();
                cc.push(v);
                next.push(cc);
            }
        }
        centers = next;
    }
    let budget = (n as f64).powf((2 * d + asm.dims.nu + 4) as f64);
    let summaries: Vec<J0Summary> = centers
        .par_iter()
        .map(|j0| {
            let bs = theta_bad_set_closed(asm, eps, lambda, j0, n, tau, 2.0)?;
            let (count, _) = interval_complexity(&bs, n, tau);
            Ok(J0Summary {
                j0: j0.clone(),
                interval_count: if bs.intervals.is_empty() { 0 } else { count },
                measure: bs.total_measure(),
            })
        })
        .collect::<Result<_>>()?;
    let worst = summaries
        .iter()
        .max_by_key(|s| s.interval_count)
        .expect("window contains at least the origin");
    Ok(ParameterClass {
        good_weak: summaries.iter().all(|s| (s.interval_count as f64) <= budget),
        budget,
        worst_j0: worst.j0.clone(),
        worst_count: worst.interval_count,
        summaries,
    })
}

/// `true` iff the smallest eigenvalue modulus of `A_N(ε, λ, 0)` (origin box)
/// is at least `N^{−τ}`, so `‖A_N^{−1}‖₀ ≤ N^{τ}`.
pub fn l2_inverse_gate(
    asm: &OperatorAssembly,
    eps: f64,
    lambda: f64,
    n: i64,
    tau: f64,
) -> Result<bool> {
    let j0 = vec![0i64; asm.dims.d];
    let spec = BoxSpectrum::exact(asm, eps, lambda, &j0, n)?;
    Ok(spec.min_modulus(0.0)? >= (n as f64).powf(-tau))
}

/// (ε, λ) rectangle with grid resolutions.
#[derive(Clone, Debug, Serialize)]
pub struct ParameterBox {
    pub eps_max: f64,
    pub lambda_range: (f64, f64),
    pub eps_grid: usize,
    pub lambda_grid: usize,
}

impl ParameterBox {
    pub fn new(eps_max: f64, lambda_range: (f64, f64), eps_grid: usize, lambda_grid: usize) -> Result<Self> {
        if eps_grid < 2 || lambda_grid < 2 {
            return Err(Error::InvalidArgument(
                "grid resolutions must be at least 2".into(),
            ));
        }
        Ok(ParameterBox {
            eps_max,
            lambda_range,
            eps_grid,
            lambda_grid,
        })
    }

    /// Default rectangle `[0, ε₀] × [1/2, 3/2]`.
    pub fn standard(eps_max: f64, eps_grid: usize, lambda_grid: usize) -> Result<Self> {
        ParameterBox::new(eps_max, (0.5, 1.5), eps_grid, lambda_grid)
    }

    fn nodes(&self) -> Vec<(f64, f64)> {
        let (llo, lhi) = self.lambda_range;
        let mut out = Vec::new();
        for i in 0..self.eps_grid {
            let e = self.eps_max * i as f64 / (self.eps_grid - 1) as f64;
            for jj in 0..self.lambda_grid {
                // Half-offset grid avoids privileged rationals like λ = 1.
                let t = (jj as f64 + 0.5) / self.lambda_grid as f64;
                out.push((e, llo + (lhi - llo) * t));
            }
        }
        out
    }
}

/// One classified grid node.
#[derive(Clone, Debug, Serialize)]
pub struct NodeRecord {
    pub eps: f64,
    pub lambda: f64,
    pub good_weak: bool,
    pub good_l2: bool,
    pub worst_j0: Vec<i64>,
    pub interval_count: usize,
}

/// Measured bad fraction of a sweep at one scale.
#[derive(Clone, Debug, Serialize)]
pub struct BadSetEstimate {
    pub n: i64,
    pub tau: f64,
    pub bad_fraction: f64,
    /// 95% binomial half-width plus the half-count continuity correction.
    pub half_width: f64,
    pub sample_count: usize,
    pub complexity_max: usize,
    pub nodes: Vec<NodeRecord>,
}

/// Classify every node of the grid (in parallel) and estimate the bad
/// fraction with its binomial confidence half-width.
pub fn sweep_measure(
    asm: &OperatorAssembly,
    bx: &ParameterBox,
    n: i64,
    tau: f64,
) -> Result<BadSetEstimate> {
    let nodes: Vec<NodeRecord> = bx
        .nodes()
        .par_iter()
        .map(|&(eps, lambda)| {
            let class = classify_parameter(asm, eps, lambda, n, tau, None)?;
            let gate = l2_inverse_gate(asm, eps, lambda, n, tau)?;
            Ok(NodeRecord {
                eps,
                lambda,
                good_weak: class.good_weak,
                good_l2: gate,
                worst_j0: class.worst_j0,
                interval_count: class.worst_count,
            })
        })
        .collect::<Result<_>>()?;
    let total = nodes.len();
    let bad = nodes.iter().filter(|r| !r.good_weak || !r.good_l2).count();
    let p = bad as f64 / total as f64;
    let half_width = 1.96 * (p * (1.0 - p) / total as f64).sqrt() + 0.5 / total as f64;
    Ok(BadSetEstimate {
        n,
        tau,
        bad_fraction: p,
        half_width,
        sample_count: total,
        complexity_max: nodes.iter().map(|r| r.interval_count).max().unwrap_or(0),
        nodes,
    })
}

/// Sweep several scales and fit the log-log slope of the bad fraction.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub estimates: Vec<BadSetEstimate>,
    /// Least-squares slope of `ln(bad fraction)` against `ln N`.
    pub slope: f64,
    /// True when a zero fraction was replaced by the half-count floor
    /// `1/(2·samples)` to keep the logarithm finite.
    pub censored: bool,
}

pub fn measure_scaling(
    asm: &OperatorAssembly,
    bx: &ParameterBox,
    n_list: &[i64],
    tau: f64,
) -> Result<ScalingReport> {
    if n_list.len() < 2 {
        return Err(Error::InvalidArgument(
            "slope needs at least two scales".into(),
        ));
    }
    let estimates: Vec<BadSetEstimate> = n_list
        .iter()
        .map(|&n| sweep_measure(asm, bx, n, tau))
        .collect::<Result<_>>()?;
    let mut censored = false;
    let pts: Vec<(f64, f64)> = estimates
        .iter()
        .map(|e| {
            let p = if e.bad_fraction > 0.0 {
                e.bad_fraction
            } else {
                censored = true;
                0.5 / e.sample_count as f64
            };
            ((e.n as f64).ln(), p.ln())
        })
        .collect();
    let k = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    Ok(ScalingReport {
        estimates,
        slope,
        censored,
    })
}

/// First-Melnikov λ-set: `λ` is admitted when `|±λω̄·l + μ_j| ≥ γN₀^{−τ₁}`
/// for all `|l|∞ ≤ N₀` and all eigenvalues `μ_j` of the truncated spatial
/// operator at the origin.
#[derive(Clone, Debug, Serialize)]
pub struct MelnikovReport {
    pub n0: i64,
    pub tau1: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub mu: Vec<f64>,
    pub omega: Vec<f64>,
    /// Bad-λ fraction measured over the grid on `[1/2, 3/2]`.
    pub bad_fraction: f64,
    pub grid_points: usize,
}

impl MelnikovReport {
    pub fn is_good(&self, lambda: f64) -> bool {
        let n0 = self.n0;
        let mut omega_ls = vec![0.0f64];
        for w in &self.omega {
            let mut next = Vec::with_capacity(omega_ls.len() * (2 * n0 + 1) as usize);
            for v in &omega_ls {
                for l in -n0..=n0 {
                    next.push(v + lambda * w * l as f64);
                }
            }
            omega_ls = next;
        }
        for &m in &self.mu {
            for &c in &omega_ls {
                if (c + m).abs() < self.threshold || (-c + m).abs() < self.threshold {
                    return false;
                }
            }
        }
        true
    }
}

pub fn melnikov_initial_set(
    asm: &OperatorAssembly,
    n0: i64,
    tau1: f64,
    gamma: f64,
    grid_points: usize,
) -> Result<MelnikovReport> {
    if grid_points < 2 {
        return Err(Error::InvalidArgument("λ-grid needs at least 2 points".into()));
    }
    let j0 = vec![0i64; asm.dims.d];
    let mu = asm.pot.spatial_block_eigs(&j0, n0);
    let mut report = MelnikovReport {
        n0,
        tau1,
        gamma,
        threshold: gamma * (n0 as f64).powf(-tau1),
        mu,
        omega: asm.omega.clone(),
        bad_fraction: 0.0,
        grid_points,
    };
    let bad = (0..grid_points)
        .into_par_iter()
        .filter(|i| {
            let lambda = 0.5 + (*i as f64 + 0.5) / grid_points as f64;
            !report.is_good(lambda)
        })
        .count();
    report.bad_fraction = bad as f64 / grid_points as f64;
    Ok(report)
}
