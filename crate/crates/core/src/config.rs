//! Experiment configuration and file I/O.
//!
//! * JSON config files with a versioned schema.
//! * Coefficient tables: text lines `l_1 … l_ν j_1 … j_d re im` after a
//!   header `nu d trunc`, used for potentials, forcings, and states.
//! * CSV and JSON result writers with fixed formatting, so identical runs
//!   produce byte-identical outputs.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::lattice::{Dims, MultiIndex};
use crate::nash_moser::SolverConfig;
use crate::nls::{diophantine_certificate, omega_bar, NonlinearityData, PotentialSpectrum, StateSpectrum};
use crate::presets::{preset, ProblemPreset};
use crate::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Sweep grids for the measure-estimation commands.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub eps_max: f64,
    pub eps_grid: usize,
    pub lambda_grid: usize,
    pub n_list: Vec<i64>,
    pub tau: f64,
    /// Also run the solver at every grid node and record its verdict.
    #[serde(default)]
    pub solve_nodes: bool,
}

/// Problem given by coefficient tables instead of a preset id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableProblem {
    /// Potential mean `m` (the oscillating part comes from `v0_path`).
    pub m: f64,
    /// Optional table of `V₀` coefficients (purely spatial: `l` columns 0).
    pub v0_path: Option<String>,
    /// Table of forcing coefficients `g`.
    pub g_path: String,
    /// Nonlinearity id: "cubic" (`f = ρ`) or "none".
    pub nonlinearity: String,
    pub nu: usize,
    pub d: usize,
}

/// Top-level experiment configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Either a preset id…
    pub preset: Option<String>,
    /// …or a table-defined problem.
    pub tables: Option<TableProblem>,
    pub seed: u64,
    pub solver: SolverConfig,
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        match (&self.preset, &self.tables) {
            (None, None) => Err(Error::InvalidArgument(
                "config needs a preset id or a table problem".into(),
            )),
            (Some(_), Some(_)) => Err(Error::InvalidArgument(
                "config gives both a preset id and tables; pick one".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Resolve the configured problem to a full preset.
    pub fn problem(&self) -> Result<ProblemPreset> {
        if let Some(id) = &self.preset {
            return preset(id);
        }
        let t = self.tables.as_ref().expect("validated");
        let dims = Dims::new(t.nu, t.d);
        let pot = match &t.v0_path {
            None => PotentialSpectrum::constant(t.d, t.m),
            Some(p) => {
                let (tdims, _, entries) = read_coefficient_table(Path::new(p))?;
                if tdims.d != t.d {
                    return Err(Error::DimensionMismatch(format!(
                        "potential table has d = {}, config d = {}",
                        tdims.d, t.d
                    )));
                }
                let modes: Vec<(Vec<i64>, Complex64)> = entries
                    .iter()
                    .filter(|(i, _)| i.l.iter().all(|&l| l == 0))
                    .map(|(i, c)| (i.j.clone(), *c))
                    .collect();
                if modes.len() != entries.len() {
                    return Err(Error::InvalidArgument(
                        "potential table has time-dependent modes".into(),
                    ));
                }
                // Tables list each mode once; `new` symmetrizes, so feed the
                // raw coefficients doubled only on one representative.
                build_potential(t.d, t.m, &modes)?
            }
        };
        let (gdims, _, gentries) = read_coefficient_table(Path::new(&t.g_path))?;
        if gdims != dims {
            return Err(Error::DimensionMismatch(format!(
                "forcing table dims ({}, {}) vs config ({}, {})",
                gdims.nu, gdims.d, t.nu, t.d
            )));
        }
        let g: HashMap<MultiIndex, Complex64> = gentries.into_iter().collect();
        let (f, fp): (
            Arc<dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync>,
            Arc<dyn Fn(&[f64], &[f64], f64) -> f64 + Send + Sync>,
        ) = match t.nonlinearity.as_str() {
            "cubic" => (Arc::new(|_: &[f64], _: &[f64], r: f64| r), Arc::new(|_: &[f64], _: &[f64], _: f64| 1.0)),
            "none" => (Arc::new(|_: &[f64], _: &[f64], _: f64| 0.0), Arc::new(|_: &[f64], _: &[f64], _: f64| 0.0)),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown nonlinearity '{other}' (use cubic or none)"
                )))
            }
        };
        let omega = omega_bar(t.nu)?;
        let dioph = diophantine_certificate(&omega, 0.2, t.nu as f64, 200);
        Ok(ProblemPreset {
            id: "tables".into(),
            dims,
            pot,
            omega,
            dioph,
            nl: NonlinearityData { f, fp, g },
        })
    }
}

/// Build a potential from listed modes without double counting conjugate
/// pairs (the constructor symmetrizes `c/2` onto `±j`).
fn build_potential(d: usize, m: f64, modes: &[(Vec<i64>, Complex64)]) -> Result<PotentialSpectrum> {
    let mut seen: HashMap<Vec<i64>, Complex64> = HashMap::new();
    for (j, c) in modes {
        let neg: Vec<i64> = j.iter().map(|v| -v).collect();
        if seen.contains_key(&neg) {
            continue; // conjugate listed explicitly; constructor adds it
        }
        seen.insert(j.clone(), *c);
    }
    let doubled: Vec<(Vec<i64>, Complex64)> = seen.into_iter().collect();
    PotentialSpectrum::new(d, m, &doubled)
}

/// Fixed float formatting used by every emitted file.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.12e}")
}

/// Write a coefficient table: header `nu d trunc`, then one line per entry
/// in canonical index order.
pub fn write_coefficient_table(
    path: &Path,
    dims: Dims,
    trunc: i64,
    entries: &[(MultiIndex, Complex64)],
) -> Result<()> {
    let mut sorted: Vec<&(MultiIndex, Complex64)> = entries.iter().collect();
    sorted.sort_by(|a, b| {
        a.0.l
            .iter()
            .chain(a.0.j.iter())
            .cmp(b.0.l.iter().chain(b.0.j.iter()))
    });
    let mut out = String::new();
    out.push_str(&format!("{} {} {}\n", dims.nu, dims.d, trunc));
    for (i, c) in sorted {
        let coords: Vec<String> = i.l.iter().chain(i.j.iter()).map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{} {} {}\n",
            coords.join(" "),
            fmt_f64(c.re),
            fmt_f64(c.im)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a coefficient table; returns the dimensions, truncation, entries.
pub fn read_coefficient_table(path: &Path) -> Result<(Dims, i64, Vec<(MultiIndex, Complex64)>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty coefficient table".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(Error::Parse(format!(
            "table header needs 'nu d trunc', got '{header}'"
        )));
    }
    let nu: usize = head[0].parse().map_err(|_| Error::Parse("bad nu".into()))?;
    let d: usize = head[1].parse().map_err(|_| Error::Parse("bad d".into()))?;
    let trunc: i64 = head[2].parse().map_err(|_| Error::Parse("bad trunc".into()))?;
    let dims = Dims::new(nu, d);
    let mut entries = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != nu + d + 2 {
            return Err(Error::Parse(format!(
                "table line has {} fields, expected {}: '{line}'",
                toks.len(),
                nu + d + 2
            )));
        }
        let mut coords = Vec::with_capacity(nu + d);
        for t in &toks[..nu + d] {
            coords.push(t.parse::<i64>().map_err(|_| {
                Error::Parse(format!("bad index '{t}' in '{line}'"))
            })?);
        }
        let re: f64 = toks[nu + d]
            .parse()
            .map_err(|_| Error::Parse(format!("bad real part in '{line}'")))?;
        let im: f64 = toks[nu + d + 1]
            .parse()
            .map_err(|_| Error::Parse(format!("bad imaginary part in '{line}'")))?;
        let i = MultiIndex::new(coords[..nu].to_vec(), coords[nu..].to_vec());
        if i.sup_norm() > trunc {
            return Err(Error::Parse(format!(
                "index {coords:?} beyond declared truncation {trunc}"
            )));
        }
        entries.push((i, Complex64::new(re, im)));
    }
    Ok((dims, trunc, entries))
}

/// Write the `a = 0` component of a state as a coefficient table (the
/// `a = 1` component is determined by the reality constraint).
pub fn write_state_table(path: &Path, u: &StateSpectrum) -> Result<()> {
    let entries: Vec<(MultiIndex, Complex64)> = u
        .support()
        .filter(|(_, c)| c[0].norm_sqr() > 0.0)
        .map(|(i, c)| (i.clone(), c[0]))
        .collect();
    write_coefficient_table(path, u.dims(), u.trunc(), &entries)
}

/// Read a state table, restoring the conjugate component.
pub fn read_state_table(path: &Path) -> Result<StateSpectrum> {
    let (dims, trunc, entries) = read_coefficient_table(path)?;
    let mut u = StateSpectrum::zero(dims, trunc);
    for (i, c) in entries {
        u.set_pair(i, c)?;
    }
    Ok(u)
}

/// Write CSV with a header row; all cells are preformatted strings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

/// Serialize any record to pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
