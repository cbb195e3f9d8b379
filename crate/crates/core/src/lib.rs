//! Numerical machinery for quasi-periodic solutions of forced nonlinear
//! Schrödinger equations on the torus `T^d` with `ν`-dimensional frequency.
//!
//! The crate is organized around the pipeline used to build and certify
//! approximate solutions:
//!
//! * [`lattice`] — the doubled Fourier site lattice `Z^ν × Z^d × {0,1}` and
//!   its sup-metric geometry (boxes, distances, canonical ordering).
//! * [`smatrix`] — matrices indexed by finite site sets together with the
//!   weighted decay norm (`s`-norm) calculus: submultiplicativity,
//!   interpolation, smoothing, decay along lines, Neumann-series left
//!   inverses.
//! * [`nls`] — assembly of the linearized operator `D(λ) + T₂ − εT₁ + θY`
//!   from potential/state spectra, pseudo-spectral coefficient extraction,
//!   and the translation covariance in `θ`.
//! * [`multiscale`] — one step of the multiscale inversion: site
//!   classification, reduction to the bad cluster block, cluster-localized
//!   left inverses, and the certified decay bound for the full inverse.
//! * [`separation`] — singular-site enumeration and chain clustering of bad
//!   sites with diameter/separation contracts.
//! * [`measure`] — θ-bad sets per spatial shift, interval-complexity
//!   budgets, (ε,λ) classification and sweeps, and the first-Melnikov set.
//! * [`nash_moser`] — the quadratic iteration on nested truncations with
//!   per-stage residual, increment, and inverse certificates.
//!
//! Heavy dense kernels (parallel multiply, LU inversion, Hermitian spectra)
//! live in [`linalg`]; frozen calibration constants in [`manifest`]; preset
//! experiment configurations in [`presets`] and [`config`].

pub mod config;
pub mod lattice;
pub mod linalg;
pub mod manifest;
pub mod measure;
pub mod multiscale;
pub mod nash_moser;
pub mod nls;
pub mod presets;
pub mod separation;
pub mod smatrix;

use thiserror::Error;

/// Crate-wide error type.
///
/// Hypothesis violations carry the measured quantities so callers can decide
/// whether to retune parameters or treat the refusal as a classification
/// outcome (e.g. a bad parameter node in a sweep).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("support condition not met: {0}")]
    SupportCondition(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("truncation overflow: {0}")]
    TruncationOverflow(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
