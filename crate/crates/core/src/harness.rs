//! Experiment configuration, deterministic parallel orchestration, CSV/JSON persistence
//! and plot-data emission.
//!
//! Work is split into independent tasks (one per trial, or per `(trial, z)` pair), each
//! with its own seeded RNG streams. Tasks only return values; results are merged in task
//! order, so report statistics do not depend on the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use faer::Mat;
use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ensembles::{stream_rng, EnsembleError, EnsembleSpec, FactorSampler};
use crate::limit_law::{
    build_domain_grid, cubic_residual, limiting_density_g, log_potential_closed_form, radial_cdf, solve_s,
    support_endpoints, GridParams, LimitLawError, LimitingCdf, LocalLawGrid,
};
use crate::linearization::{
    build_linearization, hermitize, product_matrix, sample_unit_disk, shift, DenseMatrix, LinearizationError,
    ProductModel,
};
use crate::spectra::{
    descent_property_check, product_eigenvalues, resolvent_identity_check, resolvent_row_check, singular_spectrum,
    spectrum_of_hermitization, ComplexSpectrum, SingularSpectrum, SpectraError, SpectrumDetail,
};
use crate::stats::{ks_statistic, median, Summary};
use crate::verification::{
    kolmogorov_distance, lambda_sweep, log_potential_empirical, moment_inequality_probe, selfconsistency_residual,
    smoothed_statistic, BoundConstants, ProbeCoefficients, SmoothedTestFunction, VerificationError,
};

/// Environment variable overriding the configured worker count.
pub const WORKERS_ENV: &str = "LOCALLAW_WORKERS";

/// Version string recorded in manifests.
pub const VERSION: &str = match option_env!("LOCALLAW_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Linearization(#[from] LinearizationError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    LimitLaw(#[from] LimitLawError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
    #[error("thread pool: {0}")]
    Pool(String),
}

type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MacroLaw,
    LocalLaw,
    Distance,
    LinearStatistic,
    Invariants,
    Probes,
}

/// Calibration constants and optional check thresholds. A check is enabled only when its
/// threshold is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constants {
    /// Indicator threshold `|Lambda| <= tau Im s`.
    pub tau: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    /// Constant in front of the linear-statistic bound.
    pub c_qn: f64,
    /// Power of `log n` in the linear-statistic bound.
    pub log_power: f64,
    /// Test-function exponent `a` in `(0, 1/2)`.
    pub smoothing_exponent: f64,
    /// Minimal `||z0| - 1|` before linear statistics carry a warning.
    pub tau_margin: f64,
    pub max_ks: Option<f64>,
    pub max_normalized_lambda: Option<f64>,
    pub max_delta_star: Option<f64>,
    pub max_linear_ratio: Option<f64>,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            tau: 0.5,
            c1: 20.0,
            c2: 20.0,
            c_qn: 1.0,
            log_power: 5.0,
            smoothing_exponent: 0.25,
            tau_margin: 0.1,
            max_ks: None,
            max_normalized_lambda: None,
            max_delta_star: None,
            max_linear_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub ps: Vec<f64>,
    pub resamples: usize,
    /// Dimension of the quadratic form (kept small: the cost is quadratic).
    pub quadratic_n: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { ps: vec![2.0, 4.0, 8.0], resamples: 20_000, quadratic_n: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub ensemble: EnsembleSpec,
    /// Test points `[re, im]`.
    #[serde(default)]
    pub z_points: Vec<C64>,
    #[serde(default)]
    pub grid: GridParams,
    pub trials: usize,
    #[serde(default)]
    pub constants: Constants,
    /// Regularizer `r` in `W - r zeta I - z I`.
    #[serde(default)]
    pub regularizer: f64,
    /// Compute per-block eigenvector mass (needed for the block lambda vector and the
    /// self-consistency residuals).
    #[serde(default)]
    pub block_weights: bool,
    #[serde(default)]
    pub probes: ProbeSettings,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be positive".into()));
        }
        let needs_z = matches!(self.kind, ExperimentKind::LocalLaw | ExperimentKind::Distance | ExperimentKind::LinearStatistic);
        if needs_z && self.z_points.is_empty() {
            return Err(HarnessError::Config(format!("{:?} needs at least one z point", self.kind)));
        }
        if self.workers == Some(0) {
            return Err(HarnessError::Config("workers must be positive".into()));
        }
        if !(self.regularizer >= 0.0) {
            return Err(HarnessError::Config("regularizer must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker count: explicit request, then the environment override, then the config, then
/// the available parallelism.
pub fn effective_workers(explicit: Option<usize>, configured: Option<usize>) -> usize {
    let env = std::env::var(WORKERS_ENV).ok().and_then(|s| s.trim().parse::<usize>().ok()).filter(|&w| w > 0);
    explicit
        .or(env)
        .or(configured)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// The check passes when `value <= threshold`.
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check { name: name.into(), value, threshold, passed: value <= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub base_seed: u64,
    pub version: String,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: ExperimentConfig,
    pub summaries: BTreeMap<String, Summary>,
    pub checks: Vec<Check>,
    pub tasks: usize,
    pub failed_tasks: usize,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub manifest: Manifest,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<PathBuf>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Equality of everything that must be reproducible (not timings or paths).
    pub fn same_statistics(&self, other: &Self) -> bool {
        self.summaries == other.summaries && self.checks == other.checks && self.failed_tasks == other.failed_tasks
    }
}

/// Factors of one trial as a product model.
pub fn trial_model(spec: &EnsembleSpec, trial: u64) -> Result<ProductModel> {
    let factors = FactorSampler::new(spec)?.factors(trial)?;
    Ok(ProductModel::new(factors)?)
}

/// Singular spectrum of `W - r zeta I - z I` for one trial. The regularizing direction
/// `zeta` is drawn from its own stream.
pub fn trial_spectrum(spec: &EnsembleSpec, trial: u64, z: C64, r: f64, detail: SpectrumDetail) -> Result<SingularSpectrum> {
    let w = build_linearization(&trial_model(spec, trial)?);
    let zeta = if r > 0.0 { sample_unit_disk(&mut stream_rng(spec.base_seed, ZETA_STREAM, trial)) } else { C64::new(0.0, 0.0) };
    Ok(singular_spectrum(&shift(&w, z, r, zeta)?, detail)?)
}

/// Eigenvalues of the normalized product `n^{-m/2} X^(1) ... X^(m)` for one trial.
pub fn trial_eigenvalues(spec: &EnsembleSpec, trial: u64) -> Result<ComplexSpectrum> {
    Ok(product_eigenvalues(&DenseMatrix::Real(product_matrix(&trial_model(spec, trial)?)))?)
}

const ZETA_STREAM: u64 = 1 << 20;

enum TaskOutput {
    Macro { trial: u64, eigenvalues: Vec<C64>, ks_modulus: f64, ks_argument: f64 },
    Local { trial: u64, z: C64, records: Vec<crate::verification::LambdaRecord>, residuals: Vec<(f64, f64, f64, f64)> },
    Distance { trial: u64, z: C64, delta_star: f64, s_max: f64, s_min: f64, potential: f64 },
    Linear { trial: u64, rows: Vec<(C64, crate::verification::LinearStatistic)> },
    Invariants(Vec<Check>),
    Probes(Vec<crate::verification::ProbeTable>),
}

fn macro_task(cfg: &ExperimentConfig, trial: u64) -> Result<TaskOutput> {
    let eigs = trial_eigenvalues(&cfg.ensemble, trial)?;
    let m = cfg.ensemble.m;
    let ks_modulus = ks_statistic(&eigs.moduli(), |r| radial_cdf(m, r.min(1.0)).unwrap_or(1.0));
    let ks_argument = ks_statistic(&eigs.arguments(), |t| ((t + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0));
    Ok(TaskOutput::Macro { trial, eigenvalues: eigs.eigenvalues, ks_modulus, ks_argument })
}

fn local_task(cfg: &ExperimentConfig, trial: u64, z: C64) -> Result<TaskOutput> {
    let detail = if cfg.block_weights { SpectrumDetail::BlockWeights } else { SpectrumDetail::Values };
    let spec = trial_spectrum(&cfg.ensemble, trial, z, cfg.regularizer, detail)?;
    let grid = build_domain_grid(z, cfg.ensemble.n, &cfg.grid)?;
    let records = lambda_sweep(&spec, &grid, cfg.constants.tau)?;
    let mut residuals = Vec::new();
    if cfg.block_weights {
        for node in &grid.nodes {
            let sc = selfconsistency_residual(&spec, z, C64::new(node.u, node.v))?;
            residuals.push((node.u, node.v, sc.max_upper(), sc.max_abs()));
        }
    }
    Ok(TaskOutput::Local { trial, z, records, residuals })
}

fn distance_task(cfg: &ExperimentConfig, trial: u64, z: C64, table: &LimitingCdf) -> Result<TaskOutput> {
    let spec = trial_spectrum(&cfg.ensemble, trial, z, cfg.regularizer, SpectrumDetail::Values)?;
    Ok(TaskOutput::Distance {
        trial,
        z,
        delta_star: kolmogorov_distance(&spec, table)?,
        s_max: spec.s_max(),
        s_min: spec.s_min(),
        potential: log_potential_empirical(&spec)?,
    })
}

fn linear_task(cfg: &ExperimentConfig, trial: u64) -> Result<TaskOutput> {
    let eigs = trial_eigenvalues(&cfg.ensemble, trial)?;
    let consts = BoundConstants { c: cfg.constants.c_qn, log_power: cfg.constants.log_power, tau: cfg.constants.tau_margin };
    let mut rows = Vec::new();
    for &z0 in &cfg.z_points {
        let tf = SmoothedTestFunction::new(z0, cfg.constants.smoothing_exponent, cfg.ensemble.n)?;
        rows.push((z0, smoothed_statistic(&eigs, &tf, cfg.ensemble.m, consts)?));
    }
    Ok(TaskOutput::Linear { trial, rows })
}

fn probe_task(cfg: &ExperimentConfig) -> Result<TaskOutput> {
    let p = &cfg.probes;
    let seed = cfg.ensemble.base_seed;
    let law = cfg.ensemble.law;
    let linear = moment_inequality_probe(law, &ProbeCoefficients::flat_linear(cfg.ensemble.n), &p.ps, p.resamples, seed)?;
    let quadratic = moment_inequality_probe(law, &ProbeCoefficients::flat_quadratic(p.quadratic_n), &[2.0], p.resamples, seed.wrapping_add(1))?;
    Ok(TaskOutput::Probes(vec![linear, quadratic]))
}

/// Runs the experiment on a dedicated pool and writes artifacts when an output directory
/// is configured.
pub fn run(cfg: &ExperimentConfig) -> Result<VerificationReport> {
    run_with_workers(cfg, None)
}

pub fn run_with_workers(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<VerificationReport> {
    cfg.validate()?;
    let started = Instant::now();
    let workers = effective_workers(workers, cfg.workers);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| HarnessError::Pool(e.to_string()))?;
    let trials: Vec<u64> = (0..cfg.trials as u64).collect();
    let pairs: Vec<(u64, C64)> = trials.iter().flat_map(|&t| cfg.z_points.iter().map(move |&z| (t, z))).collect();

    let outputs: Vec<Result<TaskOutput>> = pool.install(|| match cfg.kind {
        ExperimentKind::MacroLaw => trials.par_iter().map(|&t| macro_task(cfg, t)).collect(),
        ExperimentKind::LinearStatistic => trials.par_iter().map(|&t| linear_task(cfg, t)).collect(),
        ExperimentKind::LocalLaw => pairs.par_iter().map(|&(t, z)| local_task(cfg, t, z)).collect(),
        ExperimentKind::Distance => {
            let tables: Vec<Result<LimitingCdf>> = cfg.z_points.par_iter().map(|&z| Ok(LimitingCdf::new(z)?)).collect();
            pairs
                .par_iter()
                .map(|&(t, z)| {
                    let k = cfg.z_points.iter().position(|&p| p == z).expect("z from config");
                    match &tables[k] {
                        Ok(table) => distance_task(cfg, t, z, table),
                        Err(e) => Err(HarnessError::Config(format!("limit law at z = {z}: {e}"))),
                    }
                })
                .collect()
        }
        ExperimentKind::Invariants => vec![invariant_suite(cfg.ensemble.base_seed).map(TaskOutput::Invariants)],
        ExperimentKind::Probes => vec![probe_task(cfg)],
    });

    let mut report = VerificationReport {
        config: cfg.clone(),
        summaries: BTreeMap::new(),
        checks: Vec::new(),
        tasks: outputs.len(),
        failed_tasks: 0,
        errors: Vec::new(),
        warnings: cfg.ensemble.warnings(),
        manifest: Manifest { config_sha256: cfg.hash(), base_seed: cfg.ensemble.base_seed, version: VERSION.to_string(), workers },
        wall_clock_secs: 0.0,
        artifacts: Vec::new(),
    };
    let mut ok = Vec::new();
    for out in outputs {
        match out {
            Ok(o) => ok.push(o),
            Err(e) => {
                report.failed_tasks += 1;
                report.errors.push(e.to_string());
            }
        }
    }
    let tables = aggregate(cfg, &ok, &mut report);
    report.checks.push(Check::at_most("failed_tasks", report.failed_tasks as f64, 0.0));
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(dir, &tables, &mut report)?;
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = &cfg.output_dir {
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(io_err(&path))?;
    }
    Ok(report)
}

/// A CSV table held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }
}

/// Full-precision float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn summarize(report: &mut VerificationReport, key: &str, values: &[f64]) {
    if let Some(s) = Summary::of(values) {
        report.summaries.insert(key.to_string(), s);
    }
}

fn zkey(z: C64) -> String {
    format!("{}{:+}i", z.re, z.im)
}

fn aggregate(cfg: &ExperimentConfig, outputs: &[TaskOutput], report: &mut VerificationReport) -> Vec<Table> {
    let f = fmt_f64;
    let c = &cfg.constants;
    let mut tables = Vec::new();
    match cfg.kind {
        ExperimentKind::MacroLaw => {
            let mut scatter = Table::new("eigenvalues.csv", &["trial", "re", "im"]);
            let mut ks = Table::new("macro_ks.csv", &["trial", "ks_modulus", "ks_argument"]);
            let (mut km, mut ka) = (Vec::new(), Vec::new());
            for o in outputs {
                if let TaskOutput::Macro { trial, eigenvalues, ks_modulus, ks_argument } = o {
                    scatter.rows.extend(eigenvalues.iter().map(|l| vec![trial.to_string(), f(l.re), f(l.im)]));
                    ks.rows.push(vec![trial.to_string(), f(*ks_modulus), f(*ks_argument)]);
                    km.push(*ks_modulus);
                    ka.push(*ks_argument);
                }
            }
            summarize(report, "ks_modulus", &km);
            summarize(report, "ks_argument", &ka);
            if let Some(t) = c.max_ks {
                report.checks.push(Check::at_most("median_ks_modulus", median(&km).unwrap_or(f64::NAN), t));
                report.checks.push(Check::at_most("median_ks_argument", median(&ka).unwrap_or(f64::NAN), t));
            }
            tables.extend([scatter, ks]);
        }
        ExperimentKind::LocalLaw => {
            let mut sweep = Table::new("lambda_sweep.csv", &["z_re", "z_im", "u", "v", "lambda_abs", "normalized", "indicator_flag", "trial"]);
            let mut resid = Table::new("residuals.csv", &["z_re", "z_im", "u", "v", "trial", "t_upper_max", "t_all_max"]);
            let mut per_z: BTreeMap<String, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
            let mut non_finite = 0usize;
            for o in outputs {
                if let TaskOutput::Local { trial, z, records, residuals } = o {
                    let entry = per_z.entry(zkey(*z)).or_default();
                    for r in records {
                        if !r.lambda_abs.is_finite() {
                            non_finite += 1;
                        }
                        sweep.rows.push(vec![
                            f(z.re),
                            f(z.im),
                            f(r.u),
                            f(r.v),
                            f(r.lambda_abs),
                            f(r.normalized),
                            (r.indicator as u8).to_string(),
                            trial.to_string(),
                        ]);
                        entry.0.push(r.lambda_abs);
                        entry.1.push(r.normalized);
                        entry.2.push(if r.indicator { 1.0 } else { 0.0 });
                    }
                    for &(u, v, tu, ta) in residuals {
                        resid.rows.push(vec![f(z.re), f(z.im), f(u), f(v), trial.to_string(), f(tu), f(ta)]);
                    }
                }
            }
            let mut all_norm = Vec::new();
            for (k, (abs, norm, ind)) in &per_z {
                summarize(report, &format!("lambda_abs[{k}]"), abs);
                summarize(report, &format!("normalized[{k}]"), norm);
                summarize(report, &format!("indicator[{k}]"), ind);
                all_norm.extend(norm);
            }
            report.checks.push(Check::at_most("non_finite_lambda", non_finite as f64, 0.0));
            if let Some(t) = c.max_normalized_lambda {
                report.checks.push(Check::at_most("max_normalized_lambda", crate::stats::max(&all_norm).unwrap_or(f64::NAN), t));
            }
            tables.push(sweep);
            if cfg.block_weights {
                tables.push(resid);
            }
        }
        ExperimentKind::Distance => {
            let mut dist = Table::new("distances.csv", &["z_re", "z_im", "n", "trial", "delta_star"]);
            let mut edges = Table::new("edges.csv", &["z_re", "z_im", "trial", "s_max", "s_min", "log_potential", "log_potential_limit"]);
            let mut per_z: BTreeMap<String, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
            let mut all = Vec::new();
            for o in outputs {
                if let TaskOutput::Distance { trial, z, delta_star, s_max, s_min, potential } = o {
                    dist.rows.push(vec![f(z.re), f(z.im), cfg.ensemble.n.to_string(), trial.to_string(), f(*delta_star)]);
                    edges.rows.push(vec![f(z.re), f(z.im), trial.to_string(), f(*s_max), f(*s_min), f(*potential), f(log_potential_closed_form(*z))]);
                    let e = per_z.entry(zkey(*z)).or_default();
                    e.0.push(*delta_star);
                    e.1.push(*s_max);
                    e.2.push(*s_min);
                    e.3.push(potential - log_potential_closed_form(*z));
                    all.push(*delta_star);
                }
            }
            for (k, (d, hi, lo, u)) in &per_z {
                summarize(report, &format!("delta_star[{k}]"), d);
                summarize(report, &format!("s_max[{k}]"), hi);
                summarize(report, &format!("s_min[{k}]"), lo);
                summarize(report, &format!("log_potential_error[{k}]"), u);
            }
            if let Some(t) = c.max_delta_star {
                report.checks.push(Check::at_most("median_delta_star", median(&all).unwrap_or(f64::NAN), t));
            }
            tables.extend([dist, edges]);
        }
        ExperimentKind::LinearStatistic => {
            let mut lin = Table::new("linear_statistics.csv", &["z0_re", "z0_im", "n", "trial", "lhs", "bound", "ratio"]);
            let mut per_z: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            let mut warnings = Vec::new();
            for o in outputs {
                if let TaskOutput::Linear { trial, rows } = o {
                    for (z0, s) in rows {
                        lin.rows.push(vec![f(z0.re), f(z0.im), cfg.ensemble.n.to_string(), trial.to_string(), f(s.lhs), f(s.bound), f(s.ratio)]);
                        let e = per_z.entry(zkey(*z0)).or_default();
                        e.0.push(s.lhs);
                        e.1.push(s.ratio);
                        warnings.extend(s.warnings.iter().cloned());
                    }
                }
            }
            warnings.sort();
            warnings.dedup();
            report.warnings.extend(warnings);
            for (k, (lhs, ratio)) in &per_z {
                summarize(report, &format!("lhs[{k}]"), lhs);
                summarize(report, &format!("ratio[{k}]"), ratio);
                if let Some(t) = c.max_linear_ratio {
                    report.checks.push(Check::at_most(format!("median_ratio[{k}]"), median(ratio).unwrap_or(f64::NAN), t));
                }
            }
            tables.push(lin);
        }
        ExperimentKind::Invariants => {
            let mut inv = Table::new("invariants.csv", &["name", "value", "threshold", "passed"]);
            for o in outputs {
                if let TaskOutput::Invariants(checks) = o {
                    for ch in checks {
                        inv.rows.push(vec![ch.name.clone(), f(ch.value), f(ch.threshold), ch.passed.to_string()]);
                        report.checks.push(ch.clone());
                    }
                }
            }
            tables.push(inv);
        }
        ExperimentKind::Probes => {
            let mut pr = Table::new("probes.csv", &["kind", "p", "moment", "envelope", "ratio", "exact_p2"]);
            for o in outputs {
                if let TaskOutput::Probes(list) = o {
                    for table in list {
                        let kind = serde_json::to_value(table.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                        for row in &table.rows {
                            pr.rows.push(vec![kind.clone(), f(row.p), f(row.moment), f(row.envelope), f(row.ratio), row.exact_p2.map(f).unwrap_or_default()]);
                        }
                        summarize(report, &format!("ratio[{kind}]"), &table.rows.iter().map(|r| r.ratio).collect::<Vec<_>>());
                        report.warnings.extend(table.warnings.iter().cloned());
                        match table.kind {
                            crate::verification::ProbeKind::LinearRosenthal => {
                                report.checks.push(Check::at_most("rosenthal_ratio_spread", table.ratio_spread(), 3.0));
                            }
                            crate::verification::ProbeKind::QuadraticForm => {
                                if let Some(row) = table.rows.iter().find(|r| r.p == 2.0) {
                                    let exact = row.exact_p2.unwrap_or(f64::NAN);
                                    report.checks.push(Check::at_most("quadratic_p2_relative_error", (row.moment / exact - 1.0).abs(), 0.05));
                                }
                            }
                        }
                    }
                }
            }
            tables.push(pr);
        }
    }
    tables
}

/// Writes a table with a header row.
pub fn write_table(dir: &Path, table: &Table) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(&table.name);
    let csv_err = |source| HarnessError::Csv { path: path.clone(), source };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(&table.header).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

/// Writes the tables and one `manifest.csv` line per file.
pub fn write_tables(dir: &Path, tables: &[Table], manifest: &Manifest) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let mut man = Table::new("manifest.csv", &["file", "config_sha256", "base_seed", "version"]);
    for t in tables {
        paths.push(write_table(dir, t)?);
        man.rows.push(vec![t.name.clone(), manifest.config_sha256.clone(), manifest.base_seed.to_string(), manifest.version.clone()]);
    }
    paths.push(write_table(dir, &man)?);
    Ok(paths)
}

fn write_artifacts(dir: &Path, tables: &[Table], report: &mut VerificationReport) -> Result<()> {
    let mut paths = write_tables(dir, tables, &report.manifest)?;
    let man = dir.join("manifest.csv");
    let m = &report.manifest;
    let line = format!("report.json,{},{},{}\n", m.config_sha256, m.base_seed, m.version);
    fs::OpenOptions::new().append(true).open(&man).and_then(|mut f| std::io::Write::write_all(&mut f, line.as_bytes())).map_err(io_err(&man))?;
    paths.push(dir.join("report.json"));
    report.artifacts = paths;
    Ok(())
}

fn max_matching_gap(a: &[C64], b: &[C64]) -> f64 {
    // greedy nearest matching; adequate for the well-separated spectra of small matrices
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let mut best = (f64::INFINITY, usize::MAX);
        for (k, y) in b.iter().enumerate() {
            if !used[k] && (x - y).norm() < best.0 {
                best = ((x - y).norm(), k);
            }
        }
        if best.1 == usize::MAX {
            return f64::INFINITY;
        }
        used[best.1] = true;
        worst = worst.max(best.0);
    }
    worst
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// The exact-identity suite: hermitization spectrum, eigenvalues of `W^m`, resolvent
/// identity and row bound, one-descent, partial-trace sum and the cubic solver.
pub fn invariant_suite(seed: u64) -> Result<Vec<Check>> {
    let law = crate::ensembles::EntryLaw::Gaussian;
    let mut checks = Vec::new();
    let mut rng = stream_rng(seed, 1 << 40, 0);

    // eig(V) = +-svd(W - zI) against an independent SVD
    let mut herm_gap: f64 = 0.0;
    for (k, &(n, m)) in [(4usize, 1usize), (8, 2), (16, 1), (4, 4), (5, 3)].iter().enumerate() {
        let spec = EnsembleSpec::new(n, m, law, seed.wrapping_add(k as u64));
        let w = build_linearization(&trial_model(&spec, 0)?);
        for z in [C64::new(0.3, 0.0), C64::new(-0.2, 0.7), C64::new(1.8, -0.4)] {
            let shifted = shift(&w, z, 0.0, C64::new(0.0, 0.0))?;
            let ours = spectrum_of_hermitization(&hermitize(&shifted), SpectrumDetail::Values)?;
            let svd = sorted_desc(shifted.matrix().to_complex().singular_values().map_err(|e| SpectraError::Eigen(format!("{e:?}")))?);
            for (a, b) in ours.values().iter().zip(&svd) {
                herm_gap = herm_gap.max((a - b).abs());
            }
        }
    }
    checks.push(Check::at_most("hermitization_multiset", herm_gap, 1e-10));

    // eig(W^m) = eig(X) with multiplicity m
    let mut pow_gap: f64 = 0.0;
    for n in [3usize, 5, 8] {
        for m in 1..=3usize {
            let spec = EnsembleSpec::new(n, m, law, seed.wrapping_add(100 + (n * 10 + m) as u64));
            let model = trial_model(&spec, 0)?;
            let lin = product_eigenvalues(&DenseMatrix::Real(linearization_power(&model)))?.eigenvalues;
            let prod = product_eigenvalues(&DenseMatrix::Real(product_matrix(&model)))?.eigenvalues;
            let repeated: Vec<C64> = prod.iter().flat_map(|&l| std::iter::repeat_n(l, m)).collect();
            pow_gap = pow_gap.max(max_matching_gap(&repeated, &lin));
        }
    }
    checks.push(Check::at_most("linearization_power_eigenvalues", pow_gap, 1e-8));

    // resolvent identity, row bound and one-descent at nm <= 64
    let mut id_worst: f64 = 0.0;
    let mut row_worst = f64::NEG_INFINITY;
    let mut descent_failures = 0usize;
    let mut trace_gap: f64 = 0.0;
    for (k, &(n, m)) in [(16usize, 2usize), (32, 2), (64, 1)].iter().enumerate() {
        let spec = EnsembleSpec::new(n, m, law, seed.wrapping_add(200 + k as u64));
        let w = build_linearization(&trial_model(&spec, 0)?);
        let z = C64::new(0.4, 0.3);
        let v = hermitize(&shift(&w, z, 0.0, C64::new(0.0, 0.0))?);
        let dim = v.dim();
        for _ in 0..34 {
            let w1 = C64::new(rng.random_range(-3.0..3.0), 10f64.powf(rng.random_range(-2.0..0.5)));
            let w2 = C64::new(rng.random_range(-3.0..3.0), 10f64.powf(rng.random_range(-2.0..0.5)));
            let id = resolvent_identity_check(&v, w1, w2)?;
            id_worst = id_worst.max(id.residual / id.scale.max(1.0));
            let row = resolvent_row_check(&v, w1, rng.random_range(0..dim))?;
            row_worst = row_worst.max((row.lhs - row.rhs) / row.rhs.abs().max(1e-300));
        }
        for s in [1.5, 2.0, 4.0] {
            for j in 0..dim {
                if !descent_property_check(&v, 0.3, 0.05, s, j)?.holds {
                    descent_failures += 1;
                }
            }
        }
        let spec_bw = spectrum_of_hermitization(&v, SpectrumDetail::BlockWeights)?;
        for wv in [C64::new(0.1, 0.05), C64::new(-1.2, 0.5), C64::new(0.0, 2.0)] {
            let traces = spec_bw.partial_traces(wv)?;
            let avg = traces.iter().sum::<C64>() / traces.len() as f64;
            trace_gap = trace_gap.max((avg - spec_bw.empirical_stieltjes(wv)?).norm());
        }
    }
    checks.push(Check::at_most("resolvent_identity", id_worst, 1e-10));
    // relative excess of sum_k |R_jk|^2 over Im R_jj / v; rounding only
    checks.push(Check::at_most("resolvent_row_bound", row_worst, 1e-10));
    checks.push(Check::at_most("one_descent_failures", descent_failures as f64, 0.0));
    checks.push(Check::at_most("partial_trace_sum", trace_gap, 1e-10));

    // cubic solver residual and the z = 0 semicircle
    let mut resid: f64 = 0.0;
    let mut semi: f64 = 0.0;
    for _ in 0..2000 {
        let z = C64::from_polar(3.0 * rng.random::<f64>().sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
        let w = C64::new(rng.random_range(-5.0..5.0), 10f64.powf(rng.random_range(-4.0..2.0)));
        resid = resid.max(cubic_residual(z, w, solve_s(z, w)?.s));
        let s0 = solve_s(C64::new(0.0, 0.0), w)?.s;
        let mut root = (w * w - 4.0).sqrt();
        if ((-w + root) / 2.0).im < 0.0 {
            root = -root;
        }
        semi = semi.max((s0 - (-w + root) / 2.0).norm());
    }
    checks.push(Check::at_most("cubic_residual", resid, 1e-10));
    checks.push(Check::at_most("semicircle_closed_form", semi, 1e-10));
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSummary {
    pub z: C64,
    pub lambda_plus: f64,
    pub lambda_minus: Option<f64>,
    pub log_potential: f64,
    /// Rows `(x, g, G)` on `[-1.1 lambda_+, 1.1 lambda_+]`.
    pub curve: Vec<(f64, f64, f64)>,
}

pub fn limit_summary(z: C64, points: usize) -> Result<LimitSummary> {
    let law = support_endpoints(z)?;
    let table = LimitingCdf::new(z)?;
    let span = 1.1 * law.lambda_plus;
    let k = points.max(2);
    let curve = (0..k)
        .map(|i| {
            let x = -span + 2.0 * span * i as f64 / (k - 1) as f64;
            Ok((x, limiting_density_g(z, x)?, table.cdf(x)?))
        })
        .collect::<std::result::Result<Vec<_>, LimitLawError>>()?;
    Ok(LimitSummary { z, lambda_plus: law.lambda_plus, lambda_minus: law.lambda_minus, log_potential: log_potential_closed_form(z), curve })
}

impl LimitSummary {
    pub fn table(&self) -> Table {
        let mut t = Table::new("limit_curve.csv", &["x", "g", "G"]);
        t.rows = self.curve.iter().map(|&(x, g, c)| vec![fmt_f64(x), fmt_f64(g), fmt_f64(c)]).collect();
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Scatter,
    DensityCompare,
    LambdaVsV,
    DistanceVsN,
}

impl std::str::FromStr for PlotKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| HarnessError::Config(format!("unknown plot kind '{s}' (scatter, density_compare, lambda_vs_v, distance_vs_n)")))
    }
}

/// Inputs for plot-data emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotRequest {
    pub ensemble: EnsembleSpec,
    pub z: C64,
    pub trials: usize,
    pub bins: usize,
    /// Dimensions for `distance_vs_n`.
    pub sizes: Vec<usize>,
    pub grid: GridParams,
    pub v_points: usize,
}

impl Default for PlotRequest {
    fn default() -> Self {
        PlotRequest {
            ensemble: EnsembleSpec::new(512, 1, crate::ensembles::EntryLaw::Gaussian, 0),
            z: C64::new(0.5, 0.0),
            trials: 1,
            bins: 64,
            sizes: vec![64, 128, 256, 512],
            grid: GridParams::default(),
            v_points: 30,
        }
    }
}

/// Columnar plot data. `scatter`: `(re, im, circle_re, circle_im)`; `density_compare`:
/// `(x, g_limit, g_empirical_histogram)`; `lambda_vs_v`: `(v, median_lambda_abs,
/// log2n_over_nv, im_s)` sorted by `v`; `distance_vs_n`: `(n, median_delta_star,
/// inverse_n)`.
pub fn emit_plot_data(kind: PlotKind, req: &PlotRequest) -> Result<Table> {
    let f = fmt_f64;
    let trials = req.trials.max(1) as u64;
    let z = req.z;
    match kind {
        PlotKind::Scatter => {
            let mut t = Table::new("scatter.csv", &["re", "im", "circle_re", "circle_im"]);
            let mut eigs = Vec::new();
            for trial in 0..trials {
                eigs.extend(trial_eigenvalues(&req.ensemble, trial)?.eigenvalues);
            }
            let count = eigs.len();
            for (k, l) in eigs.iter().enumerate() {
                let c = C64::from_polar(1.0, std::f64::consts::TAU * k as f64 / count as f64);
                t.rows.push(vec![f(l.re), f(l.im), f(c.re), f(c.im)]);
            }
            Ok(t)
        }
        PlotKind::DensityCompare => {
            let law = support_endpoints(z)?;
            let span = 1.1 * law.lambda_plus;
            let bins = req.bins.max(2);
            let width = 2.0 * span / bins as f64;
            let mut counts = vec![0usize; bins];
            let mut total = 0usize;
            for trial in 0..trials {
                for x in trial_spectrum(&req.ensemble, trial, z, 0.0, SpectrumDetail::Values)?.symmetrized_atoms() {
                    total += 1;
                    let b = ((x + span) / width).floor();
                    if b >= 0.0 && (b as usize) < bins {
                        counts[b as usize] += 1;
                    }
                }
            }
            let mut t = Table::new("density_compare.csv", &["x", "g_limit", "g_empirical_histogram"]);
            for (b, &cnt) in counts.iter().enumerate() {
                let x = -span + (b as f64 + 0.5) * width;
                t.rows.push(vec![f(x), f(limiting_density_g(z, x)?), f(cnt as f64 / (total as f64 * width))]);
            }
            Ok(t)
        }
        PlotKind::LambdaVsV => {
            let n = req.ensemble.n;
            let grid = LocalLawGrid::vertical_line(z, n, &req.grid, 0.0, None, req.v_points.max(2))?;
            let mut per_v = vec![Vec::new(); grid.nodes.len()];
            for trial in 0..trials {
                let spec = trial_spectrum(&req.ensemble, trial, z, 0.0, SpectrumDetail::Values)?;
                for (k, node) in grid.nodes.iter().enumerate() {
                    let w = C64::new(node.u, node.v);
                    per_v[k].push((spec.empirical_stieltjes(w)? - solve_s(z, w)?.s).norm());
                }
            }
            let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
            for (node, vals) in grid.nodes.iter().zip(&per_v) {
                let w = C64::new(node.u, node.v);
                let log2 = (n as f64).ln().powi(2);
                rows.push((node.v, median(vals).unwrap_or(f64::NAN), log2 / (n as f64 * node.v), solve_s(z, w)?.s.im));
            }
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            rows.dedup_by(|a, b| a.0 == b.0);
            let mut t = Table::new("lambda_vs_v.csv", &["v", "median_lambda_abs", "log2n_over_nv", "im_s"]);
            t.rows = rows.into_iter().map(|r| vec![f(r.0), f(r.1), f(r.2), f(r.3)]).collect();
            Ok(t)
        }
        PlotKind::DistanceVsN => {
            let table = LimitingCdf::new(z)?;
            let mut t = Table::new("distance_vs_n.csv", &["n", "median_delta_star", "inverse_n"]);
            for &n in &req.sizes {
                let spec = EnsembleSpec { n, ..req.ensemble.clone() };
                let mut d = Vec::new();
                for trial in 0..trials {
                    d.push(kolmogorov_distance(&trial_spectrum(&spec, trial, z, 0.0, SpectrumDetail::Values)?, &table)?);
                }
                t.rows.push(vec![n.to_string(), f(median(&d).unwrap_or(f64::NAN)), f(1.0 / n as f64)]);
            }
            Ok(t)
        }
    }
}

/// `W^m` for the linearization of `model`.
pub fn linearization_power(model: &ProductModel) -> Mat<f64> {
    let w = build_linearization(model).matrix().clone();
    let mut wm = w.clone();
    for _ in 1..model.m() {
        wm = &wm * &w;
    }
    wm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::EntryLaw;

    fn base(kind: ExperimentKind, n: usize) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            ensemble: EnsembleSpec::new(n, 1, EntryLaw::Gaussian, 42),
            z_points: vec![C64::new(0.5, 0.0)],
            grid: GridParams::default(),
            trials: 2,
            constants: Constants::default(),
            regularizer: 0.0,
            block_weights: false,
            probes: ProbeSettings::default(),
            output_dir: None,
            workers: Some(1),
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let mut cfg = base(ExperimentKind::LocalLaw, 32);
        cfg.constants.max_delta_star = Some(0.125);
        cfg.z_points.push(C64::new(0.1, -0.7));
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(HarnessError::Parse(_))));
        v.as_object_mut().unwrap().remove("surprise");
        v["constants"]["bogus"] = serde_json::json!(2.0);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let text = r#"{"kind": "distance", "ensemble": {"n": 16, "m": 1, "law": {"kind": "rademacher"}, "base_seed": 3},
                       "z_points": [[0.5, 0.0]], "trials": 1}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.grid, GridParams::default());
        assert_eq!(cfg.constants.tau, 0.5);
        assert!(ExperimentConfig::from_json(r#"{"kind": "distance""#).is_err());
    }

    #[test]
    fn validation_errors() {
        let mut cfg = base(ExperimentKind::Distance, 16);
        cfg.z_points.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = base(ExperimentKind::MacroLaw, 16);
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn macro_smoke_has_n_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base(ExperimentKind::MacroLaw, 8);
        cfg.trials = 1;
        cfg.output_dir = Some(dir.path().to_path_buf());
        let report = run(&cfg).unwrap();
        assert!(report.passed());
        let mut rdr = csv::Reader::from_path(dir.path().join("eigenvalues.csv")).unwrap();
        assert_eq!(rdr.records().count(), 8);
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(manifest.contains(&cfg.hash()));
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn worker_count_does_not_change_statistics() {
        let cfg = base(ExperimentKind::Distance, 24);
        let a = run_with_workers(&cfg, Some(1)).unwrap();
        let b = run_with_workers(&cfg, Some(4)).unwrap();
        assert!(a.same_statistics(&b));
    }

    #[test]
    fn failed_tasks_are_counted() {
        let mut cfg = base(ExperimentKind::Distance, 16);
        cfg.z_points = vec![C64::new(1.0, 0.0), C64::new(0.5, 0.0)];
        let report = run(&cfg).unwrap();
        assert_eq!(report.failed_tasks, 2);
        assert!(!report.passed());
    }

    #[test]
    fn floats_keep_seventeen_digits() {
        let x = 0.1f64 + 0.2;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn plot_kinds_parse() {
        assert_eq!("density-compare".parse::<PlotKind>().unwrap(), PlotKind::DensityCompare);
        assert_eq!("lambda_vs_v".parse::<PlotKind>().unwrap(), PlotKind::LambdaVsV);
        assert!("pie".parse::<PlotKind>().is_err());
    }

    #[test]
    fn matching_gap() {
        let a = [C64::new(1.0, 0.0), C64::new(1.0, 0.0)];
        let b = [C64::new(1.0, 1e-12), C64::new(1.0, -1e-12)];
        assert!(max_matching_gap(&a, &b) < 1e-11);
        assert_eq!(max_matching_gap(&a, &b[..1]), f64::INFINITY);
    }
}
