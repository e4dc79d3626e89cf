use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use funclust::{Backend, Error, Result};
use funclust_cli::commands;
use funclust_cli::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "funclust", version, about = "Bayesian functional clustering of binary longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    chains: Option<usize>,
    #[arg(long, global = true)]
    sweeps: Option<u64>,
    #[arg(long, global = true)]
    backend: Option<Backend>,
    /// Output directory (for diagnose and summarize: the fit directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, env = "FUNCLUST_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated dataset, its schema and the truth.
    Simulate,
    /// Run the sampler chains and store their draws.
    Fit {
        /// Continue the fit found in --out from its checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Convergence diagnostics for a finished fit.
    Diagnose,
    /// Posterior summaries for a finished fit.
    Summarize,
    /// Repeated simulate-and-fit study with coverage and clustering metrics.
    Replicate {
        #[arg(long)]
        replicates: Option<usize>,
        /// Concentration values to compare, e.g. --nu 0.1,1,10.
        #[arg(long, value_delimiter = ',')]
        nu: Option<Vec<f64>>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&overrides(common));
    Ok(cfg)
}

fn overrides(common: &Common) -> Overrides {
    Overrides {
        seed: common.seed,
        chains: common.chains,
        sweeps: common.sweeps,
        backend: common.backend,
        out: common.out.clone(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    }
    let common = &cli.common;
    match cli.command {
        Command::Simulate => commands::simulate(&load_config(common)?),
        Command::Fit { resume: false } => commands::fit(&load_config(common)?),
        Command::Fit { resume: true } => {
            let dir = match &common.out {
                Some(d) => d.clone(),
                None => load_config(common)?.output,
            };
            let o = Overrides {
                out: None,
                ..overrides(common)
            };
            commands::resume(&dir, &o)
        }
        Command::Diagnose | Command::Summarize => {
            let cfg = common.config.as_ref().map(|_| load_config(common)).transpose()?;
            let dir = match (&common.out, &cfg) {
                (Some(d), _) => d.clone(),
                (None, Some(c)) => c.output.clone(),
                (None, None) => RunConfig::default().output,
            };
            if matches!(cli.command, Command::Diagnose) {
                commands::diagnose_fit(&dir, cfg.as_ref())
            } else {
                commands::summarize_fit(&dir, cfg.as_ref())
            }
        }
        Command::Replicate { replicates, nu } => {
            let mut cfg = load_config(common)?;
            if let Some(n) = replicates {
                cfg.replicate.n_replicates = n;
            }
            if let Some(nus) = nu {
                cfg.replicate.nus = nus;
            }
            commands::replicate(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("funclust: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
