//! `dtr` command line: simulate, truth, estimate, bench, report.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{emit_report, read_report, run_benchmark, BenchConfig, ReportFormat};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorConfig, Method, OutcomeLearner};
use crate::panel;
use crate::sem_sim::{counterfactual_truth, simulate_panel, RegimeSpec, SimSpec};

#[derive(Debug, Parser)]
#[command(name = "dtr", version, about = "Dynamic treatment regime estimation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate an observational panel and write it as CSV.
    Simulate {
        #[arg(long)]
        n: usize,
        #[arg(long = "K")]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Monte Carlo counterfactual mean as JSON.
    Truth {
        #[arg(long)]
        regime: String,
        #[arg(long = "K")]
        horizon: usize,
        #[arg(long, default_value_t = 1_000_000)]
        mc: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run one estimator on a panel file and print the estimate as JSON.
    Estimate {
        #[arg(long)]
        method: String,
        #[arg(long)]
        learner: Option<String>,
        #[arg(long)]
        regime: String,
        /// Defaults to the panel horizon.
        #[arg(long = "K")]
        horizon: Option<usize>,
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Known truth to score against.
        #[arg(long)]
        truth: Option<f64>,
    },
    /// Run a benchmark from a config file; flags override the file.
    Bench(BenchArgs),
    /// Re-emit tables from a saved report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, alias = "out_dir")]
        out_dir: PathBuf,
        /// Comma-separated subset of csv, json, plotdata.
        #[arg(long, default_value = "csv,json,plotdata")]
        formats: String,
    },
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "K")]
    horizon: Option<usize>,
    #[arg(long = "R")]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long, alias = "out_dir")]
    out_dir: Option<PathBuf>,
}

fn parse_formats(s: &str) -> Result<Vec<ReportFormat>> {
    s.split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(ReportFormat::parse)
        .collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { n, horizon, seed, out } => {
            let panel = simulate_panel(&SimSpec::new(n, horizon, seed))?;
            panel::write_csv(&panel, &out)?;
        }
        Command::Truth { regime, horizon, mc, seed } => {
            let truth = counterfactual_truth(&SimSpec::new(1, horizon, seed), RegimeSpec::parse(&regime)?, mc)?;
            println!("{}", serde_json::to_string_pretty(&truth)?);
        }
        Command::Estimate {
            method,
            learner,
            regime,
            horizon,
            panel: path,
            seed,
            truth,
        } => {
            let panel = panel::read_csv(&path)?;
            let method = Method::parse(&method)?;
            let learner = learner.as_deref().map(OutcomeLearner::parse).transpose()?;
            let horizon = horizon.unwrap_or(panel.horizon());
            let cfg = EstimatorConfig::new(method, learner, RegimeSpec::parse(&regime)?, horizon, seed);
            let mut est = estimate(&panel, &cfg)?;
            if let Some(t) = truth {
                est = est.with_truth(t);
            }
            println!("{}", serde_json::to_string_pretty(&est)?);
        }
        Command::Bench(a) => {
            let mut cfg = match &a.config {
                Some(p) => BenchConfig::from_file(p)?,
                None => BenchConfig::default(),
            };
            if let Some(v) = a.n {
                cfg.n_subjects = v;
            }
            if let Some(v) = a.horizon {
                cfg.horizon = v;
                cfg.horizons.retain(|&h| h <= v);
            }
            if let Some(v) = a.replications {
                cfg.replications = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.mc {
                cfg.mc_samples = v;
            }
            if let Some(v) = a.out_dir {
                cfg.out_dir = v;
            }
            let table = run_benchmark(&cfg)?;
            for p in emit_report(&table, &ReportFormat::ALL, &cfg.out_dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Report { input, out_dir, formats } => {
            let table = read_report(&input)?;
            for p in emit_report(&table, &parse_formats(&formats)?, &out_dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command. Returns 0 on
/// success, 1 on a usage error and 2 on a runtime error.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e @ (Error::InvalidParameter(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
