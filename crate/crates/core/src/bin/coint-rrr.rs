use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use coint_rrr::experiments::{self, ExperimentConfig};
use coint_rrr::{Error, Result};

#[derive(Parser)]
#[command(name = "coint-rrr", version, about = "Weighted reduced rank estimation for cointegrated VECMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One-step prediction benchmark over the Γ_c grid.
    Mspe(Common),
    /// Empirical against limit-law distributions of scaled estimators.
    DistCompare(Common),
    /// Bootstrap rank selection and asymptotic bias per λ_min.
    RankBias(Common),
    /// Estimate Π from CSV trials.
    Fit(Common),
    /// Write simulated trials as CSV.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replications per cell (trials for `simulate`).
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Mspe(c) => ("mspe", c),
            Command::DistCompare(c) => ("dist_compare", c),
            Command::RankBias(c) => ("rank_bias", c),
            Command::Fit(c) => ("fit", c),
            Command::Simulate(c) => ("simulate", c),
        }
    }
}

fn config_out(cfg: &ExperimentConfig) -> Option<PathBuf> {
    match cfg {
        ExperimentConfig::Mspe(c) => c.out.clone(),
        ExperimentConfig::DistCompare(c) => c.out.clone(),
        ExperimentConfig::RankBias(c) => c.out.clone(),
        ExperimentConfig::Fit(c) => c.out.clone(),
        ExperimentConfig::Simulate(c) => c.out.clone(),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let (name, args) = cli.command.parts();
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if cfg.name() != name {
        return Err(Error::Config(format!("config is for experiment {:?}, not {name:?}", cfg.name())));
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = args.reps {
        cfg.set_reps(n)?;
    }
    let out = args
        .out
        .clone()
        .or_else(|| config_out(&cfg))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out` in the config".into()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let output = pool.install(|| experiments::run(&cfg))?;
    let secs = start.elapsed().as_secs_f64();
    pool.install(|| experiments::write_outputs(&out, &cfg, &output, secs))?;
    log::info!("{name} finished in {secs:.1}s, results in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
