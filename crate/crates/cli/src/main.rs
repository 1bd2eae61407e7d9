use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use msfa::simgen::Scale;
use msfa_cli::commands::{self, SimulateOptions};
use msfa_cli::config::RunConfig;
use msfa_cli::error::Result;

#[derive(Parser)]
#[command(name = "msfa", version, about = "Bayesian multi-study factor analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Full,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to the studies listed in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        threshold_eigen: Option<f64>,
        #[arg(long)]
        threshold_edge: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a preset scenario's truth and replicate datasets.
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        scenario: u8,
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
        /// Iterations written into each replicate's config.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Score a finished run against a simulation truth directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Re-threshold the shared covariance of a finished run.
    Network {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = msfa::metrics::DEFAULT_EDGE_THRESHOLD)]
        threshold_edge: f64,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, chains, iters, burnin, threshold_eigen, threshold_edge, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.n_chains = chains.unwrap_or(cfg.n_chains);
            cfg.n_iter = iters.unwrap_or(cfg.n_iter);
            cfg.burn_in = burnin.unwrap_or(cfg.burn_in);
            cfg.threshold_eigen = threshold_eigen.unwrap_or(cfg.threshold_eigen);
            cfg.threshold_edge = threshold_edge.unwrap_or(cfg.threshold_edge);
            cfg.out = out.unwrap_or(cfg.out);
            print_json(&commands::run(cfg)?);
        }
        Command::Simulate { scenario, scale, seed, replicates, out, iters, burnin, chains } => {
            let scale = match scale {
                ScaleArg::Full => Scale::Full,
                ScaleArg::Desk => Scale::Desk,
            };
            let opts = SimulateOptions { scenario, scale, seed, replicates, out, n_iter: iters, burn_in: burnin, n_chains: chains };
            print_json(&commands::simulate(&opts)?);
        }
        Command::Evaluate { run, truth } => print_json(&commands::evaluate(&run, &truth)?),
        Command::Network { run, threshold_edge, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            print_json(&commands::network(&run, threshold_edge, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msfa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
