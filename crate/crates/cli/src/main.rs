//! `neatr`: simulate, reconstruct, fit and inspect multishot EPI data.

mod commands;
mod render;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use neatr_core::error::ErrorClass;
use neatr_core::pipeline::Stage;

use settings::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "neatr", version, about = "Multishot EPI reconstruction toolkit")]
struct Cli {
    /// TOML configuration: pipeline tables plus an optional [simulation] table
    #[arg(long, global = true, env = "NEATR_CONFIG")]
    config: Option<PathBuf>,
    /// overrides the seed of the simulation or the pipeline
    #[arg(long, global = true, env = "NEATR_SEED")]
    seed: Option<u64>,
    /// worker threads; results do not depend on it
    #[arg(long, global = true, env = "NEATR_THREADS")]
    threads: Option<usize>,
    #[arg(short, long, global = true, env = "NEATR_VERBOSE")]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with ground truth
    Simulate(commands::SimulateArgs),
    /// Run the reconstruction pipeline on a dataset directory
    Recon(commands::ReconArgs),
    /// Fit quantitative maps to reconstructed images
    Fit {
        #[arg(value_enum)]
        model: FitModel,
        #[command(flatten)]
        args: commands::FitArgs,
    },
    /// RMSE (percent) between two containers, optionally the RSOS error map
    Metrics(commands::MetricsArgs),
    /// Render one image of a container as an 8-bit PNG
    ExportPng(commands::ExportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitModel {
    Sage,
    Dti,
}

pub fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: neatr_core::error::Error| e.to_string())
}

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<neatr_core::error::Error>() {
            return match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("neatr: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let global = settings::Global {
        config: cli.config,
        seed: cli.seed,
        verbose: cli.verbose,
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&global, a),
        Command::Recon(a) => commands::recon(&global, a),
        Command::Fit { model, args } => commands::fit(&global, model, args),
        Command::Metrics(a) => commands::metrics(a),
        Command::ExportPng(a) => commands::export_png(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("neatr: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
