//! `lvrt-pinn`: batch front-end for simulation, data generation, training,
//! network encoding and boundary analysis.
//!
//! Every subcommand reads the run configuration, writes its outputs
//! atomically and prints one `key=value` summary line on stdout. Exit codes:
//! 0 success, 2 usage, 3 numeric or solver failure, 4 I/O failure.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lvrt-pinn", version, about = "LVRT boundary analysis with physics-informed networks")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set training.epochs=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Lvrt,
    Power,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one disturbance and write its trajectory.
    Simulate {
        /// Voltage drop in pu.
        #[arg(long)]
        dv: f64,
        /// Disturbance duration in seconds.
        #[arg(long = "dt-dist")]
        dt_dist: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the training grid and sample collocation points.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the network on a generated dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute pre-activation bounds over the training box.
    Bounds {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = parse_source)]
        source: Option<lvrt_pinn::milp::BoundsSource>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the MILP encoding of the network as JSON.
    Encode {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the encoding, or one boundary query with `--dv`, as an LP file.
    ExportLp {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "lvrt")]
        kind: Kind,
        /// Epsilon for LVRT queries, mu for power queries.
        #[arg(long, default_value_t = 0.0)]
        param: f64,
        #[arg(long)]
        dv: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the LVRT boundary over voltage drops.
    Boundary {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        bounds: Option<PathBuf>,
        /// Voltage margins; defaults to `analysis.epsilons`.
        #[arg(long = "eps")]
        eps: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the power-delivery boundary over voltage drops.
    PowerBoundary {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        bounds: Option<PathBuf>,
        /// Power fractions; defaults to `analysis.mus`.
        #[arg(long = "mu")]
        mu: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated boundary of the true converter.
    GroundTruth {
        #[arg(long, value_enum, default_value = "lvrt")]
        kind: Kind,
        /// Power fraction for `--kind power`.
        #[arg(long, default_value_t = 0.6)]
        mu: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a predicted curve with a reference curve.
    Compare {
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge curve CSVs into one long-format CSV for plotting.
    PlotData {
        #[arg(long = "curve", required = true)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_source(s: &str) -> Result<lvrt_pinn::milp::BoundsSource, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let result = config::load(cli.config.as_deref(), &env, &cli.sets)
        .and_then(|cfg| commands::dispatch(&cfg, cli.command));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lvrt-pinn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
