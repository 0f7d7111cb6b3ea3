use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use locallaw::harness::{
    effective_workers, emit_plot_data, invariant_suite, limit_summary, run_with_workers, sha256_hex, write_tables, Check,
    ExperimentConfig, HarnessError, Manifest, PlotKind, PlotRequest, VERSION,
};
use num_complex::Complex64 as C64;

/// Exit code for unreadable or malformed configuration files.
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "locallaw", version, about = "Simulation and verification of local laws for products of random matrices")]
struct Cli {
    /// Override the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (also settable through LOCALLAW_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run { config: PathBuf },
    /// Print support endpoints, log-potential and (x, g, G) samples of the limit law at z.
    Limit {
        /// z as `re` or `re,im`.
        #[arg(long, allow_hyphen_values = true)]
        z: String,
        #[arg(long, default_value_t = 21)]
        points: usize,
    },
    /// Run the exact-identity suite at small dimensions.
    Check,
    /// Emit plot data: scatter, density_compare, lambda_vs_v or distance_vs_n.
    PlotData {
        kind: String,
        /// Optional JSON plot request (ensemble, z, trials, bins, sizes, grid, v_points).
        #[arg(long)]
        request: Option<PathBuf>,
    },
}

fn parse_z(text: &str) -> anyhow::Result<C64> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let num = |s: &str| s.parse::<f64>().with_context(|| format!("bad number '{s}' in --z"));
    match parts.as_slice() {
        [re] => Ok(C64::new(num(re)?, 0.0)),
        [re, im] => Ok(C64::new(num(re)?, num(im)?)),
        _ => anyhow::bail!("--z takes `re` or `re,im`"),
    }
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("{} {:<34} {:.3e} (<= {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
}

fn pass_code(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return Ok(ExitCode::from(EXIT_CONFIG));
                }
            };
            let mut cfg = match ExperimentConfig::from_json(&text) {
                Ok(c) => c,
                Err(e @ (HarnessError::Parse(_) | HarnessError::Config(_) | HarnessError::Ensemble(_))) => {
                    eprintln!("error: {}: {e}", config.display());
                    return Ok(ExitCode::from(EXIT_CONFIG));
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(seed) = cli.seed {
                cfg.ensemble.base_seed = seed;
            }
            if let Some(out) = cli.out {
                cfg.output_dir = Some(out);
            }
            let report = run_with_workers(&cfg, cli.workers)?;
            for (name, s) in &report.summaries {
                println!("{name:<40} median {:.6e}  max {:.6e}  (count {})", s.median, s.max, s.count);
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for e in &report.errors {
                eprintln!("task failed: {e}");
            }
            print_checks(&report.checks);
            println!("seed {} config {} version {}", report.manifest.base_seed, report.manifest.config_sha256, report.manifest.version);
            Ok(pass_code(report.passed()))
        }
        Command::Limit { z, points } => {
            let z = parse_z(&z)?;
            let summary = limit_summary(z, points)?;
            println!("z = {} {:+}i", z.re, z.im);
            println!("lambda_plus  = {:.6}", summary.lambda_plus);
            match summary.lambda_minus {
                Some(l) => println!("lambda_minus = {l:.6}"),
                None => println!("lambda_minus = none (|z| < 1, support is one interval)"),
            }
            println!("log_potential = {:.6}", summary.log_potential);
            println!("x,g,G");
            for (x, g, big_g) in &summary.curve {
                println!("{x:.6},{g:.6},{big_g:.6}");
            }
            if let Some(dir) = cli.out {
                let manifest = Manifest {
                    config_sha256: sha256_hex(format!("limit {} {} {points}", z.re, z.im).as_bytes()),
                    base_seed: cli.seed.unwrap_or(0),
                    version: VERSION.to_string(),
                    workers: 1,
                };
                write_tables(&dir, &[summary.table()], &manifest)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check => {
            let workers = effective_workers(cli.workers, None);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
            let checks = pool.install(|| invariant_suite(cli.seed.unwrap_or(0)))?;
            print_checks(&checks);
            Ok(pass_code(checks.iter().all(|c| c.passed)))
        }
        Command::PlotData { kind, request } => {
            let kind: PlotKind = kind.parse()?;
            let mut req = match request {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    match serde_json::from_str::<PlotRequest>(&text) {
                        Ok(r) => r,
                        Err(e) => {
                            eprintln!("error: {}: {e}", path.display());
                            return Ok(ExitCode::from(EXIT_CONFIG));
                        }
                    }
                }
                None => PlotRequest::default(),
            };
            if let Some(seed) = cli.seed {
                req.ensemble.base_seed = seed;
            }
            let table = emit_plot_data(kind, &req)?;
            match cli.out {
                Some(dir) => {
                    let manifest = Manifest {
                        config_sha256: sha256_hex(&serde_json::to_vec(&req)?),
                        base_seed: req.ensemble.base_seed,
                        version: VERSION.to_string(),
                        workers: 1,
                    };
                    for p in write_tables(&dir, &[table], &manifest)? {
                        println!("wrote {}", p.display());
                    }
                }
                None => {
                    println!("{}", table.header.join(","));
                    for row in &table.rows {
                        println!("{}", row.join(","));
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
