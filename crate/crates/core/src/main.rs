//! Command-line front end.
//!
//! Subcommands: `solve`, `sweep`, `cluster-report`, `certify-inverse`,
//! `selftest`. Exit codes: 0 converged/ok, 1 check failure, 2 excluded,
//! 3 stagnated, 64 config parse error, 74 I/O error.

use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use smalldiv::config::{
    fmt_f64, write_csv, write_json, write_state_table, ExperimentConfig,
};
use smalldiv::lattice::{box_sites, MultiIndex};
use smalldiv::manifest::{
    ConstantsManifest, CALIBRATION_PAIRS, CALIBRATION_SEED,
};
use smalldiv::measure::{measure_scaling, sweep_measure, BadSetEstimate, ParameterBox};
use smalldiv::multiscale::{diag_part, multiscale_invert, ScaleParams};
use smalldiv::nash_moser::{context_for, run, SolverConfig, Verdict};
use smalldiv::nls::OperatorAssembly;
use smalldiv::separation::{build_bad_clusters, BoxCertifier, ClusterPartition};
use smalldiv::smatrix::{interpolation_check, line_decay_bound};
use smalldiv::{Error, Result};

#[derive(Parser)]
#[command(
    name = "smalldiv",
    about = "Quasi-periodic solutions of forced NLS on tori: solver, sweeps, certificates"
)]
struct Cli {
    /// Path to the JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker-pool size (defaults to the number of CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Parameter profile: `desk` (small exponents) or `paper` (the profile
    /// satisfying every structural inequality).
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the iterative solver on the configured problem.
    Solve,
    /// Sweep the (ε, λ) grid at each configured scale; emit CSV + summary.
    Sweep,
    /// Report the resonance clusters of the configured problem.
    ClusterReport,
    /// Run one certified multiscale inversion and report its bounds.
    CertifyInverse,
    /// Check the calibrated norm inequalities on the seeded corpus.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.workers {
        // Ignore the error if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("cannot create output directory {}: {e}", cli.out.display());
        return ExitCode::from(74);
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) => 74,
                Error::Parse(_) | Error::Json(_) => 64,
                _ => 1,
            })
        }
    }
}

/// Load + validate the config; the seed can be overridden by SMALLDIV_SEED.
fn load_config(cli: &Cli) -> std::result::Result<ExperimentConfig, u8> {
    let path = match &cli.config {
        Some(p) => p,
        None => {
            eprintln!("--config PATH is required for this subcommand");
            return Err(64);
        }
    };
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(Error::Io(e)) => {
            eprintln!("cannot read config {}: {e}", path.display());
            return Err(74);
        }
        Err(e) => {
            eprintln!("config error in {}: {e}", path.display());
            return Err(64);
        }
    };
    if let Ok(s) = std::env::var("SMALLDIV_SEED") {
        match s.parse::<u64>() {
            Ok(v) => cfg.seed = v,
            Err(_) => {
                eprintln!("SMALLDIV_SEED is not a u64: '{s}'");
                return Err(64);
            }
        }
    }
    if let Some(p) = &cli.profile {
        if p != "desk" && p != "paper" {
            eprintln!("--profile must be 'desk' or 'paper', got '{p}'");
            return Err(64);
        }
        cfg.solver.profile = p.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Solve => cmd_solve(cli),
        Cmd::Sweep => cmd_sweep(cli),
        Cmd::ClusterReport => cmd_cluster_report(cli),
        Cmd::CertifyInverse => cmd_certify_inverse(cli),
        Cmd::Selftest => cmd_selftest(cli),
    }
}

fn cmd_solve(cli: &Cli) -> Result<u8> {
    let cfg = match load_config(cli) {
        Ok(c) => c,
        Err(code) => return Ok(code),
    };
    let problem = cfg.problem()?;
    let out = match run(&cfg.solver, &problem) {
        Ok(o) => o,
        Err(e) => {
            // A run writes a record even on failure paths.
            #[derive(Serialize)]
            struct FailureRecord<'a> {
                config: &'a SolverConfig,
                preset: String,
                error: String,
            }
            write_json(
                &cli.out.join("run.json"),
                &FailureRecord {
                    config: &cfg.solver,
                    preset: problem.id.clone(),
                    error: e.to_string(),
                },
            )?;
            return Err(e);
        }
    };
    write_json(&cli.out.join("run.json"), &out.record)?;
    write_state_table(&cli.out.join("solution.txt"), &out.state)?;
    let code = match &out.record.verdict {
        Verdict::Converged { stage } => {
            println!(
                "converged at stage {stage}: final residual {:.3e}",
                out.record.final_residual_s1
            );
            0
        }
        Verdict::Excluded { stage, reason } => {
            println!("excluded at stage {stage}: {reason}");
            2
        }
        Verdict::Stagnated { reason } => {
            println!("stagnated: {reason}");
            3
        }
    };
    println!("wrote {} and solution.txt", cli.out.join("run.json").display());
    Ok(code)
}

#[derive(Serialize)]
struct SweepSummary {
    seed: u64,
    preset: String,
    tau: f64,
    n_list: Vec<i64>,
    estimates: Vec<BadSetEstimate>,
    /// Log-log slope of the bad fraction against N (needs ≥ 2 scales).
    slope: Option<f64>,
    censored: bool,
}

fn cmd_sweep(cli: &Cli) -> Result<u8> {
    let cfg = match load_config(cli) {
        Ok(c) => c,
        Err(code) => return Ok(code),
    };
    let sw = cfg.sweep.clone().ok_or_else(|| {
        Error::Parse("sweep needs a 'sweep' section in the config".into())
    })?;
    if sw.n_list.is_empty() {
        return Err(Error::Parse("sweep.n_list is empty".into()));
    }
    let problem = cfg.problem()?;
    let asm = OperatorAssembly::linear(problem.dims, problem.pot.clone(), problem.omega.clone())?;
    let bx = ParameterBox::standard(sw.eps_max, sw.eps_grid, sw.lambda_grid)?;
    let (estimates, slope, censored) = if sw.n_list.len() >= 2 {
        let rep = measure_scaling(&asm, &bx, &sw.n_list, sw.tau)?;
        (rep.estimates, Some(rep.slope), rep.censored)
    } else {
        (vec![sweep_measure(&asm, &bx, sw.n_list[0], sw.tau)?], None, false)
    };
    let header = [
        "N",
        "eps",
        "lambda",
        "good_weak",
        "good_l2",
        "worst_j0",
        "interval_count",
        "verdict",
    ];
    let mut rows = Vec::new();
    for est in &estimates {
        for node in &est.nodes {
            let verdict = if sw.solve_nodes {
                let mut solver = cfg.solver.clone();
                solver.eps = node.eps;
                solver.lambda = node.lambda;
                match run(&solver, &problem)?.record.verdict {
                    Verdict::Converged { .. } => "converged",
                    Verdict::Excluded { .. } => "excluded",
                    Verdict::Stagnated { .. } => "stagnated",
                }
            } else {
                ""
            };
            rows.push(vec![
                est.n.to_string(),
                fmt_f64(node.eps),
                fmt_f64(node.lambda),
                u8::from(node.good_weak).to_string(),
                u8::from(node.good_l2).to_string(),
                node.worst_j0
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                node.interval_count.to_string(),
                verdict.to_string(),
            ]);
        }
    }
    write_csv(&cli.out.join("sweep.csv"), &header, &rows)?;
    write_json(
        &cli.out.join("sweep_summary.json"),
        &SweepSummary {
            seed: cfg.seed,
            preset: problem.id.clone(),
            tau: sw.tau,
            n_list: sw.n_list.clone(),
            estimates,
            slope,
            censored,
        },
    )?;
    match slope {
        Some(s) => println!("sweep done: {} scales, slope {s:.3}", sw.n_list.len()),
        None => println!("sweep done: 1 scale"),
    }
    println!(
        "wrote {} and sweep_summary.json",
        cli.out.join("sweep.csv").display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct ClusterReportFile {
    preset: String,
    eps: f64,
    lambda: f64,
    n: i64,
    n_prime: i64,
    theta_reg: f64,
    partition: ClusterPartition,
}

/// Scale and regularity threshold used by the reporting commands: the first
/// configured sweep scale (default 4) and `Θ = 10(1 + m)`.
fn report_scale(cfg: &ExperimentConfig) -> i64 {
    cfg.sweep
        .as_ref()
        .and_then(|s| s.n_list.first().copied())
        .unwrap_or(4)
}

fn cmd_cluster_report(cli: &Cli) -> Result<u8> {
    let cfg = match load_config(cli) {
        Ok(c) => c,
        Err(code) => return Ok(code),
    };
    let problem = cfg.problem()?;
    let asm = OperatorAssembly::linear(problem.dims, problem.pot.clone(), problem.omega.clone())?;
    let n = report_scale(&cfg);
    let theta_reg = 10.0 * (1.0 + asm.pot.m.abs());
    let params = ScaleParams::desk(theta_reg);
    let ctx = context_for(problem.dims.b());
    let nprime = params.n_prime(n);
    let cert = BoxCertifier::new(
        &asm,
        cfg.solver.eps,
        cfg.solver.lambda,
        0.0,
        n,
        &params,
        &ctx,
    );
    let partition = build_bad_clusters(&cert, nprime, theta_reg)?;
    println!(
        "{} clusters over {} bad sites at N={n}, N'={nprime}: max diameter {}, min separation {}, contract {}",
        partition.clusters.len(),
        partition.total_sites(),
        partition.diam_max,
        partition.min_sep,
        if partition.pass { "holds" } else { "VIOLATED" }
    );
    let pass = partition.pass;
    write_json(
        &cli.out.join("clusters.json"),
        &ClusterReportFile {
            preset: problem.id.clone(),
            eps: cfg.solver.eps,
            lambda: cfg.solver.lambda,
            n,
            n_prime: nprime,
            theta_reg,
            partition,
        },
    )?;
    println!("wrote {}", cli.out.join("clusters.json").display());
    Ok(u8::from(!pass))
}

fn cmd_certify_inverse(cli: &Cli) -> Result<u8> {
    let cfg = match load_config(cli) {
        Ok(c) => c,
        Err(code) => return Ok(code),
    };
    let problem = cfg.problem()?;
    let asm = OperatorAssembly::linear(problem.dims, problem.pot.clone(), problem.omega.clone())?;
    let n = report_scale(&cfg);
    let ctx = context_for(problem.dims.b());
    // Assemble on the box of radius N' around the origin and derive the
    // regularity threshold from the measured coupling size.
    let probe_params = ScaleParams::desk(1.0);
    let nprime = probe_params.n_prime(n);
    let set = Arc::new(box_sites(
        problem.dims,
        &MultiIndex::zero(problem.dims),
        nprime,
    )?);
    let a = asm.assemble(cfg.solver.eps, cfg.solver.lambda, 0.0, &set)?;
    let off = a.sub(&diag_part(&a))?;
    let theta_reg = 10.0 * (1.0 + off.snorm(probe_params.s1, &ctx));
    let params = if cfg.solver.profile == "paper" {
        ScaleParams::consistent(theta_reg)
    } else {
        ScaleParams::desk(theta_reg)
    };
    let certifier = BoxCertifier::new(
        &asm,
        cfg.solver.eps,
        cfg.solver.lambda,
        0.0,
        n,
        &params,
        &ctx,
    );
    let clusters = build_bad_clusters(&certifier, nprime, theta_reg)?;
    let (_, certificate, report) = multiscale_invert(&a, n, &params, &clusters, &ctx)?;
    #[derive(Serialize)]
    struct CertifyFile {
        preset: String,
        eps: f64,
        lambda: f64,
        theta_reg: f64,
        certificate: smalldiv::multiscale::GoodnessCertificate,
        report: smalldiv::multiscale::MultiscaleReport,
    }
    let pass = certificate.pass;
    println!(
        "multiscale inverse at N={n}, N'={nprime}: dense deviation {:.3e}, certificate {}",
        report.dense_rel_dev,
        if pass { "PASS" } else { "FAIL" }
    );
    write_json(
        &cli.out.join("certify.json"),
        &CertifyFile {
            preset: problem.id.clone(),
            eps: cfg.solver.eps,
            lambda: cfg.solver.lambda,
            theta_reg,
            certificate,
            report,
        },
    )?;
    println!("wrote {}", cli.out.join("certify.json").display());
    Ok(u8::from(!pass))
}

fn cmd_selftest(cli: &Cli) -> Result<u8> {
    // The constants manifest lives in the output directory; regenerate it
    // when absent or unreadable.
    let path = cli.out.join("constants.json");
    let manifest = match ConstantsManifest::load(&path) {
        Ok(m) => {
            println!("loaded constants manifest {}", path.display());
            m
        }
        Err(e) => {
            if path.exists() {
                eprintln!("warning: manifest {} is corrupt ({e}); regenerating", path.display());
            } else {
                println!("no manifest at {}; generating", path.display());
            }
            let m = smalldiv::manifest::desk_manifest().clone();
            m.save(&path)?;
            println!("wrote {}", path.display());
            m
        }
    };
    let ctx = manifest.norm_context(2, 2.0)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.b == 2 && (e.s0 - 2.0).abs() < 1e-12)
        .ok_or_else(|| Error::Parse("manifest has no (b=2, s0=2) entry".into()))?;
    // Disjoint corpus: seeded one past the calibration corpus.
    let corpus = smalldiv::manifest::random_pair_corpus(2, CALIBRATION_PAIRS, CALIBRATION_SEED + 1);
    let mut failures: Vec<String> = Vec::new();
    // Worst constant the corpus demands at each calibration regularity.
    let mut demanded = vec![0.0f64; entry.cs.len()];
    for (idx, (m1, m2)) in corpus.iter().enumerate() {
        for (si, &(s, _)) in entry.cs.iter().enumerate() {
            let w = interpolation_check(m1, m2, s, &ctx)?;
            if !w.holds {
                failures.push(format!(
                    "pair {idx} (corpus seed {}): {} at s={s}: {:.6e} > {:.6e} with C(s)={:.3}",
                    CALIBRATION_SEED + 1,
                    if s == ctx.s0 { "product bound" } else { "interpolation bound" },
                    w.lhs,
                    w.rhs,
                    w.cs
                ));
            }
            let denom = 0.5 * w.m1_s * w.m2_s0;
            if denom > 1e-300 {
                demanded[si] = demanded[si].max((w.lhs - 0.5 * w.m1_s0 * w.m2_s) / denom);
            }
        }
        let ld = line_decay_bound(m1, 2.0, &ctx);
        if !ld.holds {
            failures.push(format!(
                "pair {idx} (corpus seed {}): line-decay bound: {:.6e} > {:.6e}",
                CALIBRATION_SEED + 1,
                ld.lhs,
                ld.rhs
            ));
        }
    }
    // The stored constants (not the floored lookup) must cover the corpus.
    for (si, &(s, c)) in entry.cs.iter().enumerate() {
        if s <= entry.s0 {
            continue;
        }
        if c < demanded[si] * (1.0 - 1e-12) {
            failures.push(format!(
                "calibration constant C({s}) = {c:.3} below the corpus-measured requirement {:.3}",
                demanded[si]
            ));
        }
    }
    // Integrity: the manifest must agree with a deterministic regeneration
    // from the frozen calibration corpus.
    let s_grid: Vec<f64> = entry.cs.iter().map(|&(s, _)| s).collect();
    let expected = ConstantsManifest::generate(&[(entry.b, entry.s0, s_grid)]);
    let exp = &expected.entries[0];
    if (entry.k0 - exp.k0).abs() > 1e-9 || (entry.k1 - exp.k1).abs() > 1e-9 {
        failures.push(format!(
            "manifest weight constants (K0={}, K1={}) disagree with regeneration (K0={}, K1={})",
            entry.k0, entry.k1, exp.k0, exp.k1
        ));
    }
    for (&(s, c), &(_, ce)) in entry.cs.iter().zip(&exp.cs) {
        if (c - ce).abs() > 1e-9 * ce.max(1.0) {
            failures.push(format!(
                "calibration constant C({s}) = {c:.6} disagrees with the frozen-corpus value {ce:.6}"
            ));
        }
    }
    if failures.is_empty() {
        println!(
            "selftest: all norm inequalities hold on {} pairs ({} checks)",
            corpus.len(),
            corpus.len() * 5
        );
        Ok(0)
    } else {
        for f in failures.iter().take(10) {
            eprintln!("selftest FAIL: {f}");
        }
        eprintln!("selftest: {} failing checks", failures.len());
        Ok(1)
    }
}
