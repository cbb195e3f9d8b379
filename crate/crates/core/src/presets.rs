//! Built-in problem presets.
//!
//! Each preset bundles a potential, a certified frequency direction, the
//! nonlinearity `f`, and the forcing `g`, so that CLI runs are fully
//! reproducible from an id string.

use num_complex::Complex64;
use std::collections::HashMap;
use std::sync::Arc;

use crate::lattice::{Dims, MultiIndex};
use crate::nls::{
    diophantine_certificate, omega_bar, DiophantineReport, NonlinearityData, PotentialSpectrum,
};
use crate::{Error, Result};

/// Diophantine audit range for preset frequencies.
const DIOPHANTINE_LMAX: i64 = 200;

/// A fully specified problem instance.
#[derive(Clone, Debug)]
pub struct ProblemPreset {
    pub id: String,
    pub dims: Dims,
    pub pot: PotentialSpectrum,
    /// Frequency direction `ω̄` with its small-divisor certificate.
    pub omega: Vec<f64>,
    pub dioph: DiophantineReport,
    pub nl: NonlinearityData,
}

pub fn preset_ids() -> &'static [&'static str] {
    &["cubic-d1", "linear-forced", "cubic-d2"]
}

/// Forcing `g(φ, x) = cos(φ) cos(x₁)`: four modes of weight 1/4.
fn cosine_forcing(dims: Dims) -> HashMap<MultiIndex, Complex64> {
    let mut g = HashMap::new();
    let q = Complex64::new(0.25, 0.0);
    for sl in [-1i64, 1] {
        for sj in [-1i64, 1] {
            let mut l = vec![0i64; dims.nu];
            let mut j = vec![0i64; dims.d];
            l[0] = sl;
            j[0] = sj;
            g.insert(MultiIndex::new(l, j), q);
        }
    }
    g
}

/// Resolve a preset id.
pub fn preset(id: &str) -> Result<ProblemPreset> {
    match id {
        // Cubic NLS in one space dimension: V = 1 + 0.3 cos x, f = ρ,
        // g = cos(φ)cos(x).
        "cubic-d1" => {
            let dims = Dims::new(1, 1);
            let pot = PotentialSpectrum::new(1, 1.0, &[(vec![1], Complex64::new(0.3, 0.0))])?;
            let omega = omega_bar(1)?;
            let dioph = diophantine_certificate(&omega, 0.9, 1.0, DIOPHANTINE_LMAX);
            Ok(ProblemPreset {
                id: id.into(),
                dims,
                pot,
                omega,
                dioph,
                nl: NonlinearityData {
                    f: Arc::new(|_, _, rho| rho),
                    fp: Arc::new(|_, _, _| 1.0),
                    g: cosine_forcing(dims),
                },
            })
        }
        // Linear problem: f = 0, constant potential; the solution is the
        // explicit diagonal solve u = εL_ω^{-1}g.
        "linear-forced" => {
            let dims = Dims::new(1, 1);
            let pot = PotentialSpectrum::constant(1, 1.0);
            let omega = omega_bar(1)?;
            let dioph = diophantine_certificate(&omega, 0.9, 1.0, DIOPHANTINE_LMAX);
            Ok(ProblemPreset {
                id: id.into(),
                dims,
                pot,
                omega,
                dioph,
                nl: NonlinearityData {
                    f: Arc::new(|_, _, _| 0.0),
                    fp: Arc::new(|_, _, _| 0.0),
                    g: cosine_forcing(dims),
                },
            })
        }
        // Cubic NLS on T²  with two frequencies (golden-ratio direction).
        "cubic-d2" => {
            let dims = Dims::new(2, 2);
            let pot = PotentialSpectrum::new(
                2,
                1.0,
                &[
                    (vec![1, 0], Complex64::new(0.2, 0.0)),
                    (vec![0, 1], Complex64::new(0.2, 0.0)),
                ],
            )?;
            let omega = omega_bar(2)?;
            let dioph = diophantine_certificate(&omega, 0.2, 2.0, DIOPHANTINE_LMAX);
            Ok(ProblemPreset {
                id: id.into(),
                dims,
                pot,
                omega,
                dioph,
                nl: NonlinearityData {
                    f: Arc::new(|_, _, rho| rho),
                    fp: Arc::new(|_, _, _| 1.0),
                    g: cosine_forcing(dims),
                },
            })
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown preset '{other}' (known: {})",
            preset_ids().join(", ")
        ))),
    }
}
