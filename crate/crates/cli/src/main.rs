use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use farfield::config::StudyConfig;
use farfield::lattice::DefectSpec;

mod commands;

/// Point-defect equilibria with multipole far-field boundary conditions.
#[derive(Parser, Debug)]
#[command(name = "farfield", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Relax one ball (the first test radius) through every configured order.
    Relax,
    /// Run the convergence study: all radii and orders against the reference.
    Study,
    /// Compute the reference solution and store it in the cache.
    Reference,
    /// Tabulate the continuum kernels against the numeric lattice Green's function.
    Greens,
    /// Run the oracle suite; exits with status 4 if any check fails.
    Validate,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration. Without it: a vacancy with default settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core (overrides output.threads).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Report zero wall times so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Force residual at which a solve stops (overrides solver.tolerance).
    #[arg(long, global = true, value_name = "X")]
    tol: Option<f64>,
    /// Comma-separated test radii in units of a0 (overrides study.radii).
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Comma-separated orders (overrides study.orders).
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    orders: Option<Vec<usize>>,
}

impl Common {
    fn load(&self) -> farfield::Result<StudyConfig> {
        let mut cfg = match &self.config {
            Some(path) => StudyConfig::from_path(path)?,
            None => StudyConfig::new(DefectSpec::Vacancy),
        };
        if let Some(dir) = &self.out {
            cfg.output.dir = dir.clone();
        }
        if let Some(n) = self.threads {
            cfg.output.threads = n;
        }
        cfg.output.deterministic |= self.deterministic;
        if let Some(tol) = self.tol {
            cfg.solver.tolerance = tol;
        }
        if let Some(radii) = &self.radii {
            cfg.study.radii = radii.clone();
        }
        if let Some(orders) = &self.orders {
            cfg.study.orders = orders.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit statuses.
const CONFIG: u8 = 2;
const SOLVER: u8 = 3;
const VALIDATION: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    use farfield::Error;
    if let Some(commands::ValidationFailed(_)) = err.downcast_ref() {
        return VALIDATION;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_solver_failure() => SOLVER,
        Some(Error::Basis(_)) => SOLVER,
        Some(Error::Config(_) | Error::Calibration(_) | Error::Instability(_) | Error::Domain(_)) => CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = cli.common.load().map_err(anyhow::Error::from).and_then(|cfg| {
        if cfg.output.threads > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(cfg.output.threads).build_global()?;
        }
        commands::run(cli.command, &cfg, cli.common.force)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
