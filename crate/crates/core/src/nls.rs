//! Assembly of the linearized Schrödinger operator on the site lattice.
//!
//! The operator acting on the doubled coefficient vector `(u⁺, u⁻)` is
//!
//! ```text
//! A(ε, λ, θ) = D(λ) + T₂ − ε T₁ + θ Y
//! ```
//!
//! with diagonal entries
//!
//! ```text
//! d_{(l,j),0} = −λ ω̄·l + ‖j‖² + m − θ      (component a = 0, u⁺)
//! d_{(l,j),1} = +λ ω̄·l + ‖j‖² + m + θ      (component a = 1, u⁻)
//! ```
//!
//! `T₂` couples spatial modes through the zero-mean potential spectrum
//! `(V₀)_{j−j′}` on each component; `T₁` is the Töplitz block matrix
//! `[[p, q], [q̄, p]]` built from the multiplier coefficients
//! `p = f(φ,x,ρ) + f′(φ,x,ρ)ρ`, `q = f′(φ,x,ρ)(u⁺)²` of the state `u`.
//! Translating the frequency indices by `l₁` is the same as shifting
//! `θ → θ + λω̄·l₁` (covariance), which is what lets one parameter family
//! of matrices stand in for all time-translates of a box.
//!
//! Coefficients of `p`, `q` and of the composed nonlinearity are extracted
//! pseudo-spectrally on a quadrature grid at least 4× the truncation per
//! dimension, with a grid-doubling aliasing check.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::collections::HashMap;
use std::sync::Arc;

use crate::lattice::{Dims, MultiIndex, Site, SiteSet};
use crate::linalg::CMat;
use crate::smatrix::{NormContext, SiteMatrix};
use crate::{Error, Result};

/// Imaginary part of `p` above this (relative) size fails the realness check.
const P_REAL_TOL: f64 = 1e-10;
/// Relative tolerance of the grid-doubling aliasing check.
const ALIAS_TOL: f64 = 1e-8;

/// Frequency presets: `ν = 1 → (1)`, `ν = 2 → (1, golden ratio)`.
pub fn omega_bar(nu: usize) -> Result<Vec<f64>> {
    match nu {
        1 => Ok(vec![1.0]),
        2 => Ok(vec![1.0, (1.0 + 5f64.sqrt()) / 2.0]),
        _ => Err(Error::InvalidArgument(format!(
            "no frequency preset for ν = {nu}"
        ))),
    }
}

/// Diophantine certificate: verify `|ω̄·l| ≥ γ₀ |l|^{−τ₀}` for all
/// `0 < |l| ≤ l_max`. For the golden-ratio preset this is the classical
/// continued-fraction worst case, so the scan tightness is also reported.
#[derive(Clone, Debug)]
pub struct DiophantineReport {
    pub gamma0: f64,
    pub tau0: f64,
    pub l_max: i64,
    /// Smallest observed ratio `|ω̄·l| · |l|^{τ₀}` over the scan.
    pub tightness: f64,
    pub holds: bool,
}

pub fn diophantine_certificate(omega: &[f64], gamma0: f64, tau0: f64, l_max: i64) -> DiophantineReport {
    let nu = omega.len();
    let mut tightness = f64::INFINITY;
    let mut l = vec![-l_max; nu];
    'outer: loop {
        let sup = l.iter().map(|v| v.abs()).max().unwrap_or(0);
        if sup > 0 {
            let dot: f64 = omega.iter().zip(&l).map(|(w, &lv)| w * lv as f64).sum();
            tightness = tightness.min(dot.abs() * (sup as f64).powf(tau0));
        }
        let mut dim = nu;
        loop {
            if dim == 0 {
                break 'outer;
            }
            dim -= 1;
            if l[dim] < l_max {
                l[dim] += 1;
                for v in l.iter_mut().skip(dim + 1) {
                    *v = -l_max;
                }
                break;
            }
        }
    }
    DiophantineReport {
        gamma0,
        tau0,
        l_max,
        tightness,
        holds: tightness >= gamma0,
    }
}

/// Real potential `V(x) = m + V₀(x)` with positive mean `m` and zero-mean
/// oscillating part given by its Fourier coefficients.
#[derive(Clone, Debug)]
pub struct PotentialSpectrum {
    d: usize,
    /// Mean value `m > 0`.
    pub m: f64,
    v0: HashMap<Vec<i64>, Complex64>,
}

impl PotentialSpectrum {
    /// Build from the mean and the nonzero modes. Conjugate symmetry
    /// `(V₀)_{−j} = conj((V₀)_j)` (realness of `V`) is enforced exactly by
    /// symmetrizing, and a zero mode or non-positive mean is rejected.
    pub fn new(d: usize, m: f64, modes: &[(Vec<i64>, Complex64)]) -> Result<Self> {
        if m <= 0.0 {
            return Err(Error::InvalidArgument(format!("potential mean {m} ≤ 0")));
        }
        let mut v0: HashMap<Vec<i64>, Complex64> = HashMap::new();
        for (j, c) in modes {
            if j.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "potential mode {:?} in dimension {d}",
                    j
                )));
            }
            if j.iter().all(|&v| v == 0) {
                return Err(Error::InvalidArgument(
                    "zero mode belongs in the mean value, not the oscillating part".into(),
                ));
            }
            *v0.entry(j.clone()).or_insert(Complex64::new(0.0, 0.0)) += 0.5 * c;
            let neg: Vec<i64> = j.iter().map(|v| -v).collect();
            *v0.entry(neg).or_insert(Complex64::new(0.0, 0.0)) += 0.5 * c.conj();
        }
        Ok(PotentialSpectrum { d, m, v0 })
    }

    /// Constant potential `V ≡ m`.
    pub fn constant(d: usize, m: f64) -> Self {
        PotentialSpectrum {
            d,
            m,
            v0: HashMap::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Oscillating-part coefficient at spatial offset `j` (0 if absent).
    pub fn v0(&self, j: &[i64]) -> Complex64 {
        self.v0.get(j).copied().unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn v0_modes(&self) -> impl Iterator<Item = (&Vec<i64>, &Complex64)> {
        self.v0.iter()
    }

    /// Largest sup-norm of a stored mode.
    pub fn v0_radius(&self) -> i64 {
        self.v0
            .keys()
            .map(|j| j.iter().map(|v| v.abs()).max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    /// Spatial Galerkin block `Π_{N,j₀}(−Δ + V)`: the `(2N+1)^d` Hermitian
    /// matrix over the spatial box centered at `j₀`, with entries
    /// `‖j‖²δ_{jj′} + m δ_{jj′} + (V₀)_{j−j′}`.
    pub fn spatial_block(&self, j0: &[i64], n: i64) -> CMat {
        let side = (2 * n + 1) as usize;
        let total = side.pow(self.d as u32);
        let mut idx = vec![vec![0i64; self.d]; total];
        for (flat, jv) in idx.iter_mut().enumerate() {
            let mut rem = flat;
            for dim in (0..self.d).rev() {
                jv[dim] = j0[dim] - n + (rem % side) as i64;
                rem /= side;
            }
        }
        let mut m = CMat::zeros(total, total);
        for (r, jr) in idx.iter().enumerate() {
            for (c, jc) in idx.iter().enumerate() {
                let off: Vec<i64> = jr.iter().zip(jc).map(|(a, b)| a - b).collect();
                let mut v = self.v0(&off);
                if r == c {
                    let jsq: i64 = jr.iter().map(|x| x * x).sum();
                    v += Complex64::new(jsq as f64 + self.m, 0.0);
                }
                m.set(r, c, v);
            }
        }
        m
    }

    /// Eigenvalues of the spatial Galerkin block, ascending.
    pub fn spatial_block_eigs(&self, j0: &[i64], n: i64) -> Vec<f64> {
        self.spatial_block(j0, n)
            .hermitian_eigenvalues()
            .expect("spatial block is square")
    }
}

/// Doubled coefficient vector `(u⁺, u⁻)` supported on `|i|∞ ≤ trunc`.
#[derive(Clone, Debug)]
pub struct StateSpectrum {
    dims: Dims,
    trunc: i64,
    coeffs: HashMap<MultiIndex, [Complex64; 2]>,
}

impl StateSpectrum {
    pub fn zero(dims: Dims, trunc: i64) -> Self {
        StateSpectrum {
            dims,
            trunc,
            coeffs: HashMap::new(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn trunc(&self) -> i64 {
        self.trunc
    }

    pub fn get(&self, i: &MultiIndex, a: u8) -> Complex64 {
        self.coeffs
            .get(i)
            .map(|c| c[a as usize])
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn set(&mut self, i: MultiIndex, a: u8, v: Complex64) -> Result<()> {
        if i.l.len() != self.dims.nu || i.j.len() != self.dims.d {
            return Err(Error::DimensionMismatch("coefficient index dimension".into()));
        }
        if i.sup_norm() > self.trunc {
            return Err(Error::TruncationOverflow(format!(
                "index sup-norm {} beyond truncation {}",
                i.sup_norm(),
                self.trunc
            )));
        }
        self.coeffs.entry(i).or_insert([Complex64::new(0.0, 0.0); 2])[a as usize] = v;
        Ok(())
    }

    /// Set `u⁺_i` and simultaneously `u⁻_{−i} = conj(u⁺_i)` (reality pair).
    pub fn set_pair(&mut self, i: MultiIndex, v: Complex64) -> Result<()> {
        let neg = i.neg();
        self.set(i, 0, v)?;
        self.set(neg, 1, v.conj())
    }

    pub fn support(&self) -> impl Iterator<Item = (&MultiIndex, &[Complex64; 2])> {
        self.coeffs.iter()
    }

    /// Largest deviation from the reality constraint
    /// `u⁻_{l,j} = conj(u⁺_{−l,−j})`.
    pub fn reality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        let mut keys: Vec<&MultiIndex> = self.coeffs.keys().collect();
        keys.sort();
        for i in keys {
            let minus = self.get(i, 1);
            let plus_refl = self.get(&i.neg(), 0);
            worst = worst.max((minus - plus_refl.conj()).norm());
        }
        worst
    }

    /// Project onto the reality manifold by averaging the constraint pair,
    /// returning the projected state and the drift that was removed.
    pub fn project_reality(&self) -> (StateSpectrum, f64) {
        let mut out = StateSpectrum::zero(self.dims, self.trunc);
        let drift = self.reality_defect();
        let mut keys: Vec<MultiIndex> = self.coeffs.keys().cloned().collect();
        for k in self.coeffs.keys() {
            let neg = k.neg();
            if !self.coeffs.contains_key(&neg) {
                keys.push(neg);
            }
        }
        keys.sort();
        keys.dedup();
        for i in keys {
            let plus = 0.5 * (self.get(&i, 0) + self.get(&i.neg(), 1).conj());
            if plus.norm_sqr() > 0.0 {
                out.set(i.clone(), 0, plus).expect("within truncation");
                out.set(i.neg(), 1, plus.conj()).expect("within truncation");
            }
        }
        (out, drift)
    }

    /// Sobolev norm `(K₀ Σ (|u⁺_i|² + |u⁻_i|²) ⟨i⟩^{2s})^{1/2}`.
    pub fn sobolev_norm(&self, s: f64, ctx: &NormContext) -> f64 {
        let mut total = 0.0;
        for (i, c) in &self.coeffs {
            let ang = i.angle() as f64;
            total += (c[0].norm_sqr() + c[1].norm_sqr()) * ang.powf(2.0 * s);
        }
        (ctx.k0 * total).sqrt()
    }

    pub fn add(&self, rhs: &StateSpectrum) -> Result<StateSpectrum> {
        if self.dims != rhs.dims {
            return Err(Error::DimensionMismatch("state dimensions differ".into()));
        }
        let mut out = StateSpectrum::zero(self.dims, self.trunc.max(rhs.trunc));
        for (i, c) in self.coeffs.iter().chain(rhs.coeffs.iter()) {
            let e = out
                .coeffs
                .entry(i.clone())
                .or_insert([Complex64::new(0.0, 0.0); 2]);
            e[0] += c[0];
            e[1] += c[1];
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &StateSpectrum) -> Result<StateSpectrum> {
        self.add(&rhs.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> StateSpectrum {
        let mut out = self.clone();
        for v in out.coeffs.values_mut() {
            v[0] *= c;
            v[1] *= c;
        }
        out
    }

    /// Projection `P_N`: keep `|i|∞ ≤ n`.
    pub fn project(&self, n: i64) -> StateSpectrum {
        let mut out = StateSpectrum::zero(self.dims, n);
        for (i, c) in &self.coeffs {
            if i.sup_norm() <= n {
                out.coeffs.insert(i.clone(), *c);
            }
        }
        out
    }

    /// Complementary projection `P_N^⊥`: keep `|i|∞ > n`.
    pub fn project_tail(&self, n: i64) -> StateSpectrum {
        let mut out = StateSpectrum::zero(self.dims, self.trunc.max(n));
        for (i, c) in &self.coeffs {
            if i.sup_norm() > n {
                out.coeffs.insert(i.clone(), *c);
            }
        }
        out
    }

    /// Pack into a vector over an explicit site set (absent sites read 0).
    pub fn to_vector(&self, set: &SiteSet) -> Vec<Complex64> {
        set.sites()
            .iter()
            .map(|k| self.get(&k.i, k.a))
            .collect()
    }

    /// Unpack a vector over a site set into a state.
    pub fn from_vector(dims: Dims, set: &SiteSet, v: &[Complex64]) -> Result<StateSpectrum> {
        let trunc = set
            .sites()
            .iter()
            .map(|k| k.i.sup_norm())
            .max()
            .unwrap_or(0);
        let mut out = StateSpectrum::zero(dims, trunc);
        for (k, &val) in set.sites().iter().zip(v) {
            if val.norm_sqr() > 0.0 {
                out.set(k.i.clone(), k.a, val)?;
            }
        }
        Ok(out)
    }
}

/// Nonlinearity data: the density-dependent multiplier `f(φ, x, ρ)`, its
/// `ρ`-derivative, and the Fourier coefficients of the forcing `g`.
#[derive(Clone)]
pub struct NonlinearityData {
    pub f: Arc<dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync>,
    pub fp: Arc<dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync>,
    /// Forcing coefficients `g_{l,j}` (of the scalar function `g(φ,x)`).
    pub g: HashMap<MultiIndex, Complex64>,
}

impl std::fmt::Debug for NonlinearityData {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("NonlinearityData")
            .field("g_modes", &self.g.len())
            .finish()
    }
}

impl NonlinearityData {
    /// Forcing as a doubled state on the given truncation:
    /// `(g, ḡ)` with `g⁻_{l,j} = conj(g_{−l,−j})`.
    pub fn forcing_state(&self, dims: Dims, trunc: i64) -> Result<StateSpectrum> {
        let mut out = StateSpectrum::zero(dims, trunc);
        for (i, &c) in &self.g {
            if i.sup_norm() > trunc {
                return Err(Error::TruncationOverflow(format!(
                    "forcing mode at sup-norm {} beyond truncation {trunc}",
                    i.sup_norm()
                )));
            }
            out.set(i.clone(), 0, c)?;
            out.set(i.neg(), 1, c.conj())?;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Pseudo-spectral quadrature.
// ---------------------------------------------------------------------------

/// Tensor grid with per-axis FFTs, used to move between Fourier
/// coefficients and point values on `T^{ν+d}`.
struct Quadrature {
    dims: Dims,
    /// Points per axis (same for all axes).
    grid: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Quadrature {
    fn new(dims: Dims, grid: usize) -> Self {
        let mut planner = FftPlanner::new();
        Quadrature {
            dims,
            grid,
            forward: planner.plan_fft(grid, FftDirection::Forward),
            inverse: planner.plan_fft(grid, FftDirection::Inverse),
        }
    }

    fn b(&self) -> usize {
        self.dims.b()
    }

    fn len(&self) -> usize {
        self.grid.pow(self.b() as u32)
    }

    /// In-place FFT along every axis.
    fn fft_all_axes(&self, data: &mut [Complex64], direction: FftDirection) {
        let g = self.grid;
        let b = self.b();
        let fft = match direction {
            FftDirection::Forward => &self.forward,
            FftDirection::Inverse => &self.inverse,
        };
        let mut scratch = vec![Complex64::new(0.0, 0.0); g];
        for axis in 0..b {
            // Stride of the axis in row-major layout.
            let stride = g.pow((b - 1 - axis) as u32);
            let block = stride * g;
            for base in (0..data.len()).step_by(block) {
                for off in 0..stride {
                    for t in 0..g {
                        scratch[t] = data[base + off + t * stride];
                    }
                    fft.process(&mut scratch);
                    for t in 0..g {
                        data[base + off + t * stride] = scratch[t];
                    }
                }
            }
        }
    }

    /// Flat grid index of a frequency multi-index (wrapping negatives).
    fn freq_flat(&self, i: &MultiIndex) -> usize {
        let g = self.grid as i64;
        let mut idx = 0usize;
        for &v in i.l.iter().chain(i.j.iter()) {
            idx = idx * self.grid + (v.rem_euclid(g)) as usize;
        }
        idx
    }

    /// Point values of one component from its coefficients.
    fn synthesize(&self, u: &StateSpectrum, a: u8) -> Vec<Complex64> {
        let mut data = vec![Complex64::new(0.0, 0.0); self.len()];
        for (i, c) in u.support() {
            data[self.freq_flat(i)] = c[a as usize];
        }
        self.fft_all_axes(&mut data, FftDirection::Inverse);
        data
    }

    /// Coefficients (truncated to `|i|∞ ≤ trunc`) from point values.
    fn analyze(&self, mut data: Vec<Complex64>, trunc: i64) -> HashMap<MultiIndex, Complex64> {
        self.fft_all_axes(&mut data, FftDirection::Forward);
        let scale = 1.0 / self.len() as f64;
        let mut out = HashMap::new();
        let b = self.b();
        let mut idx = vec![-trunc; b];
        loop {
            let i = MultiIndex::new(
                idx[..self.dims.nu].to_vec(),
                idx[self.dims.nu..].to_vec(),
            );
            let v = data[self.freq_flat(&i)] * scale;
            if v.norm_sqr() > 0.0 {
                out.insert(i, v);
            }
            let mut dim = b;
            loop {
                if dim == 0 {
                    return out;
                }
                dim -= 1;
                if idx[dim] < trunc {
                    idx[dim] += 1;
                    for v in idx.iter_mut().skip(dim + 1) {
                        *v = -trunc;
                    }
                    break;
                }
            }
        }
    }

    /// Angle coordinates of a flat grid point, axis by axis.
    fn angles(&self, flat: usize) -> (Vec<f64>, Vec<f64>) {
        let b = self.b();
        let mut coords = vec![0usize; b];
        let mut rem = flat;
        for dim in (0..b).rev() {
            coords[dim] = rem % self.grid;
            rem /= self.grid;
        }
        let step = 2.0 * std::f64::consts::PI / self.grid as f64;
        let phi: Vec<f64> = coords[..self.dims.nu].iter().map(|&c| c as f64 * step).collect();
        let x: Vec<f64> = coords[self.dims.nu..].iter().map(|&c| c as f64 * step).collect();
        (phi, x)
    }
}

/// Multiplier coefficients of the linearized nonlinearity at the state `u`.
#[derive(Clone, Debug, Default)]
pub struct PQData {
    pub p: HashMap<MultiIndex, Complex64>,
    pub q: HashMap<MultiIndex, Complex64>,
    /// Largest imaginary part seen in the `p` point values (realness audit).
    pub p_imag_defect: f64,
    /// Relative deviation between the working and doubled grids.
    pub alias_defect: f64,
}

fn map_max_abs(m: &HashMap<MultiIndex, Complex64>) -> f64 {
    m.values().map(|v| v.norm()).fold(0.0, f64::max)
}

fn pq_on_grid(
    quad: &Quadrature,
    u: &StateSpectrum,
    nl: &NonlinearityData,
    trunc_out: i64,
) -> (HashMap<MultiIndex, Complex64>, HashMap<MultiIndex, Complex64>, f64) {
    let plus = quad.synthesize(u, 0);
    let minus = quad.synthesize(u, 1);
    let mut p_vals = vec![Complex64::new(0.0, 0.0); quad.len()];
    let mut q_vals = vec![Complex64::new(0.0, 0.0); quad.len()];
    let mut imag_defect = 0.0f64;
    for t in 0..quad.len() {
        let (phi, x) = quad.angles(t);
        let rho_c = plus[t] * minus[t];
        imag_defect = imag_defect.max(rho_c.im.abs());
        let rho = rho_c.re;
        let fv = (nl.f)(&phi, &x, rho);
        let fpv = (nl.fp)(&phi, &x, rho);
        p_vals[t] = Complex64::new(fv + fpv * rho, 0.0);
        q_vals[t] = Complex64::new(fpv, 0.0) * plus[t] * plus[t];
    }
    let p = quad.analyze(p_vals, trunc_out);
    let q = quad.analyze(q_vals, trunc_out);
    (p, q, imag_defect)
}

/// Coefficients `p`, `q` of `T₁` at the state `u`, truncated to
/// `|i|∞ ≤ trunc_out`, with realness and aliasing audits.
///
/// The working grid has `4(2·max(trunc(u), trunc_out) + 1)` points per axis;
/// the same computation is repeated on the doubled grid and the two
/// coefficient sets must agree to `1e-8` relative, otherwise the
/// nonlinearity is effectively not resolved and an error is returned.
pub fn compute_pq(u: &StateSpectrum, nl: &NonlinearityData, trunc_out: i64) -> Result<PQData> {
    let dims = u.dims();
    let base = 4 * (2 * u.trunc().max(trunc_out) + 1) as usize;
    let quad = Quadrature::new(dims, base);
    let (p, q, imag_defect) = pq_on_grid(&quad, u, nl, trunc_out);
    let quad2 = Quadrature::new(dims, 2 * base);
    let (p2, q2, _) = pq_on_grid(&quad2, u, nl, trunc_out);
    let scale = map_max_abs(&p).max(map_max_abs(&q)).max(1e-300);
    let mut alias = 0.0f64;
    for (m1, m2) in [(&p, &p2), (&q, &q2)] {
        for (k, v) in m1 {
            alias = alias.max((v - m2.get(k).copied().unwrap_or_default()).norm());
        }
        for (k, v) in m2 {
            alias = alias.max((v - m1.get(k).copied().unwrap_or_default()).norm());
        }
    }
    let alias_rel = alias / scale;
    if alias_rel > ALIAS_TOL {
        return Err(Error::NumericalFailure(format!(
            "aliasing check failed: grids disagree by {alias_rel:.3e} relative"
        )));
    }
    let p_scale = map_max_abs(&p).max(1e-300);
    if imag_defect > P_REAL_TOL * p_scale.max(1.0) {
        return Err(Error::NumericalFailure(format!(
            "density has imaginary part {imag_defect:.3e}; state violates the reality constraint"
        )));
    }
    Ok(PQData {
        p: p2,
        q: q2,
        p_imag_defect: imag_defect,
        alias_defect: alias_rel,
    })
}

/// `(f(φ,x,ρ)u⁺, f(φ,x,ρ)u⁻)` evaluated pseudo-spectrally and truncated.
pub fn apply_f(u: &StateSpectrum, nl: &NonlinearityData, trunc_out: i64) -> Result<StateSpectrum> {
    let dims = u.dims();
    let base = 4 * (2 * u.trunc().max(trunc_out) + 1) as usize;
    let quad = Quadrature::new(dims, base);
    let plus = quad.synthesize(u, 0);
    let minus = quad.synthesize(u, 1);
    let mut fp_vals = vec![Complex64::new(0.0, 0.0); quad.len()];
    let mut fm_vals = vec![Complex64::new(0.0, 0.0); quad.len()];
    for t in 0..quad.len() {
        let (phi, x) = quad.angles(t);
        let rho = (plus[t] * minus[t]).re;
        let fv = (nl.f)(&phi, &x, rho);
        fp_vals[t] = Complex64::new(fv, 0.0) * plus[t];
        fm_vals[t] = Complex64::new(fv, 0.0) * minus[t];
    }
    let pc = quad.analyze(fp_vals, trunc_out);
    let mc = quad.analyze(fm_vals, trunc_out);
    let mut out = StateSpectrum::zero(dims, trunc_out);
    for (i, v) in pc {
        out.set(i, 0, v)?;
    }
    for (i, v) in mc {
        out.set(i, 1, v)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Operator assembly.
// ---------------------------------------------------------------------------

/// Everything needed to assemble `A(ε, λ, θ)` on any finite site set.
#[derive(Clone, Debug)]
pub struct OperatorAssembly {
    pub dims: Dims,
    pub pot: PotentialSpectrum,
    /// Frequency direction `ω̄` (the actual frequency is `λω̄`).
    pub omega: Vec<f64>,
    /// Töplitz coefficients of the `T₁` diagonal block (`p`, real function).
    pub p: HashMap<MultiIndex, Complex64>,
    /// Töplitz coefficients of the `T₁` off-diagonal block (`q`).
    pub q: HashMap<MultiIndex, Complex64>,
}

impl OperatorAssembly {
    /// Assembly of the linear operator (no `T₁`, i.e. `u = 0` or `ε = 0`).
    pub fn linear(dims: Dims, pot: PotentialSpectrum, omega: Vec<f64>) -> Result<Self> {
        if pot.d() != dims.d || omega.len() != dims.nu {
            return Err(Error::DimensionMismatch(
                "potential or frequency dimension does not match the lattice".into(),
            ));
        }
        Ok(OperatorAssembly {
            dims,
            pot,
            omega,
            p: HashMap::new(),
            q: HashMap::new(),
        })
    }

    /// Assembly linearized at the state `u` (computes `p`, `q`).
    pub fn at_state(
        dims: Dims,
        pot: PotentialSpectrum,
        omega: Vec<f64>,
        u: &StateSpectrum,
        nl: &NonlinearityData,
        pq_trunc: i64,
    ) -> Result<Self> {
        let mut asm = OperatorAssembly::linear(dims, pot, omega)?;
        let pq = compute_pq(u, nl, pq_trunc)?;
        asm.p = pq.p;
        asm.q = pq.q;
        Ok(asm)
    }

    /// True when `T₁` vanishes, so the operator is block-diagonal in the
    /// frequency indices and the fast spectral paths apply.
    pub fn time_diagonal(&self) -> bool {
        self.p.values().all(|v| v.norm_sqr() == 0.0)
            && self.q.values().all(|v| v.norm_sqr() == 0.0)
    }

    fn pq_at(&self, map: &HashMap<MultiIndex, Complex64>, off: &MultiIndex) -> Complex64 {
        map.get(off).copied().unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// Diagonal entry `d_{i,a}(λ, θ)`.
    pub fn diagonal_entry(&self, k: &Site, lambda: f64, theta: f64) -> f64 {
        let omega_l: f64 = self
            .omega
            .iter()
            .zip(&k.i.l)
            .map(|(w, &l)| w * l as f64)
            .sum();
        let jsq = k.i.j_norm_sq() as f64;
        match k.a {
            0 => -lambda * omega_l + jsq + self.pot.m - theta,
            _ => lambda * omega_l + jsq + self.pot.m + theta,
        }
    }

    /// Dense assembly of `A(ε, λ, θ)` over `set × set`.
    pub fn assemble(
        &self,
        eps: f64,
        lambda: f64,
        theta: f64,
        set: &Arc<SiteSet>,
    ) -> Result<SiteMatrix> {
        if set.dims() != self.dims {
            return Err(Error::DimensionMismatch(
                "site set does not match assembly dimensions".into(),
            ));
        }
        let n = set.len();
        let mut m = CMat::zeros(n, n);
        let sites = set.sites();
        for (r, k) in sites.iter().enumerate() {
            for (c, kp) in sites.iter().enumerate() {
                let mut v = Complex64::new(0.0, 0.0);
                let same_l = k.i.l == kp.i.l;
                let off = k.i.sub(&kp.i);
                if k.a == kp.a {
                    if same_l {
                        let joff: Vec<i64> =
                            k.i.j.iter().zip(&kp.i.j).map(|(a, b)| a - b).collect();
                        v += self.pot.v0(&joff);
                    }
                    if eps != 0.0 {
                        v -= eps * self.pq_at(&self.p, &off);
                    }
                    if r == c {
                        // v0 has no zero mode, so only −Δ + m and D(λ) here.
                        v += Complex64::new(self.diagonal_entry(k, lambda, theta), 0.0);
                    }
                } else if eps != 0.0 {
                    if k.a == 0 {
                        v -= eps * self.pq_at(&self.q, &off);
                    } else {
                        v -= eps * self.pq_at(&self.q, &off.neg()).conj();
                    }
                }
                m.set(r, c, v);
            }
        }
        SiteMatrix::new(set.clone(), set.clone(), m)
    }

    /// Off-diagonal part `T = T₂ − εT₁` alone (no `D(λ) + θY` diagonal).
    pub fn assemble_offdiagonal(&self, eps: f64, set: &Arc<SiteSet>) -> Result<SiteMatrix> {
        let full = self.assemble(eps, 0.0, 0.0, set)?;
        let mut m = full.mat().clone();
        for (r, k) in set.sites().iter().enumerate() {
            let d = self.diagonal_entry(k, 0.0, 0.0);
            m.set(r, r, m.get(r, r) - Complex64::new(d, 0.0));
        }
        SiteMatrix::new(set.clone(), set.clone(), m)
    }

    /// Apply `L_ω(λ) = D(λ) + T₂` (the `ε = 0, θ = 0` operator) to a state.
    ///
    /// The potential convolution can push coefficients beyond `out_trunc`;
    /// those are dropped and their sup-norm is returned as the tail report.
    pub fn apply_l_omega(
        &self,
        u: &StateSpectrum,
        lambda: f64,
        out_trunc: i64,
    ) -> Result<(StateSpectrum, f64)> {
        let mut out = StateSpectrum::zero(self.dims, out_trunc);
        let mut acc: HashMap<(MultiIndex, u8), Complex64> = HashMap::new();
        for (i, c) in u.support() {
            for a in 0..2u8 {
                let v = c[a as usize];
                if v.norm_sqr() == 0.0 {
                    continue;
                }
                let k = Site::new(i.clone(), a);
                let d = self.diagonal_entry(&k, lambda, 0.0);
                *acc.entry((i.clone(), a)).or_default() += v * d;
                for (joff, &vc) in self.pot.v0_modes() {
                    let mut shifted = i.clone();
                    for (jv, o) in shifted.j.iter_mut().zip(joff) {
                        *jv += o;
                    }
                    *acc.entry((shifted, a)).or_default() += v * vc;
                }
            }
        }
        let mut tail = 0.0f64;
        for ((i, a), v) in acc {
            if i.sup_norm() > out_trunc {
                tail = tail.max(v.norm());
            } else if v.norm_sqr() > 0.0 {
                out.set(i, a, v)?;
            }
        }
        Ok((out, tail))
    }
}

/// Measured covariance deviation: assemble the box centered at `(l₁, j₁)`
/// at parameter `θ` and the box centered at `(0, j₁)` at `θ + λω̄·l₁`, and
/// compare entrywise under the order-preserving site relabeling.
pub fn covariance_check(
    asm: &OperatorAssembly,
    eps: f64,
    lambda: f64,
    theta: f64,
    l1: &[i64],
    j1: &[i64],
    n: i64,
) -> Result<f64> {
    let center = MultiIndex::new(l1.to_vec(), j1.to_vec());
    let base_center = MultiIndex::new(vec![0; asm.dims.nu], j1.to_vec());
    let shifted_set = Arc::new(crate::lattice::box_sites(asm.dims, &center, n)?);
    let base_set = Arc::new(crate::lattice::box_sites(asm.dims, &base_center, n)?);
    let a_shift = asm.assemble(eps, lambda, theta, &shifted_set)?;
    let omega_l1: f64 = asm
        .omega
        .iter()
        .zip(l1)
        .map(|(w, &l)| w * l as f64)
        .sum();
    let a_base = asm.assemble(eps, lambda, theta + lambda * omega_l1, &base_set)?;
    Ok(a_shift.mat().sub(a_base.mat())?.max_abs())
}
