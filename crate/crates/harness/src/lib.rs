//! Experiment harness for the kvlab compression laboratory: configuration,
//! cached training and calibration, sweeps, the basis ablation, the theory
//! suite and report merging. The `kvlab` binary is a thin CLI over [`run`].

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod report;
pub mod theory_report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};

#[derive(Debug, Parser)]
#[command(name = "kvlab", version, about = "Rank reduction vs. quantization for KV-cache compression")]
#[command(after_help = "Exit codes: 0 success, 2 config error, 3 precondition error, 4 numerical error.\n\
Run `kvlab print-config` to see every setting and its default.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; every field is optional and defaults as in `print-config`.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run a single replicate with this root seed instead of the config's seed list.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for independent (scheme, seed) jobs [default: available cores].
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Output directory [default: the config's `out`, initially runs/default].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train (or load) each replicate's model and build its calibration metrics; cached by config hash.
    Calibrate,
    /// Evaluate every scheme and budget group on every seed, plus the joint K×V grid.
    Sweep,
    /// INT-b perplexity across bases, with the spread compared to the rank-reduction gap.
    BasisAblation,
    /// Model-free checks: KL asymmetry, eigenvector optimality certificates, perturbation series.
    Theory,
    /// Merge sweep runs under a directory into consolidated CSV/JSON and plot data.
    Report {
        /// Directory holding runs [default: --out].
        dir: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    PrintConfig,
}

/// Effective config: file (or defaults), then command-line overrides.
pub fn effective_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one CLI invocation and returns the text to print.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = effective_config(&cli.common)?;
    if let Some(0) = cli.common.jobs {
        return Err(HarnessError::Config("--jobs must be at least 1".into()));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.common.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let out = cfg.out.clone();
    pool.install(|| match &cli.command {
        Command::Calibrate => commands::calibrate(&cfg, &out),
        Command::Sweep => commands::sweep(&cfg, &out),
        Command::BasisAblation => commands::basis_ablation(&cfg, &out),
        Command::Theory => commands::theory(&cfg, &out),
        Command::Report { dir } => report::report(dir.as_deref().unwrap_or(&out)),
        Command::PrintConfig => Ok(cfg.to_toml()),
    })
}
