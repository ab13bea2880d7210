use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod model;
mod snapshot;
mod table;

use error::CliError;
use snapshot::CalibMethod;

/// Seed used whenever `--seed` is not given.
pub const DEFAULT_SEED: u64 = 42;

/// Distribution-free prediction sets, outlier screening and coverage
/// simulations from CSV files.
#[derive(Parser, Debug)]
#[command(name = "conformal", version)]
struct Cli {
    /// Random seed [default: 42; for `simulate`, the config's seed]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Write results here instead of stdout
    #[arg(long, short, global = true, value_name = "FILE")]
    output: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score a calibration CSV and write a JSON snapshot
    Calibrate {
        #[arg(long, value_name = "CSV")]
        calib: PathBuf,
        #[arg(long, value_enum)]
        method: CalibMethod,
        /// Model artifact JSON, or `precomputed-scores` to read a `score` column
        #[arg(long, default_value = "precomputed-scores")]
        model: String,
        #[arg(long, value_parser = parse_alpha)]
        alpha: f64,
        /// Randomize cumulative-probability scores with the `u` column or seeded draws
        #[arg(long)]
        randomize: bool,
        /// Number of classes, when neither the model nor the data fixes it
        #[arg(long)]
        k: Option<usize>,
    },
    /// Prediction sets for each row of a test CSV
    Predict {
        #[arg(long, value_name = "JSON")]
        snapshot: PathBuf,
        #[arg(long, value_name = "CSV")]
        test: PathBuf,
        /// Recalibrate the snapshot at this level
        #[arg(long, value_parser = parse_alpha)]
        alpha: Option<f64>,
        /// Also emit conformal p-values: per label, or for the row's `y`
        #[arg(long)]
        emit_pvalues: bool,
    },
    /// Run a Monte Carlo coverage experiment from a JSON config
    Simulate {
        #[arg(long, value_name = "JSON")]
        config: PathBuf,
        /// Override the replicate count with the quick setting of 1000
        #[arg(long)]
        fast: bool,
    },
    /// Screen test cases against a reference sample with Benjamini–Hochberg
    Outliers {
        #[arg(long, value_name = "CSV")]
        reference: PathBuf,
        #[arg(long, value_name = "CSV")]
        tests: PathBuf,
        #[arg(long, value_parser = parse_alpha)]
        q: f64,
    },
    /// Largest r whose tolerance set has PAC coverage at level (alpha, delta)
    PacR {
        #[arg(long)]
        n: usize,
        #[arg(long, value_parser = parse_alpha)]
        alpha: f64,
        #[arg(long, value_parser = parse_alpha)]
        delta: f64,
    },
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} must lie strictly between 0 and 1"))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out: Box<dyn Write> = match &cli.output {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let result = match cli.command {
        Command::Calibrate {
            calib,
            method,
            model,
            alpha,
            randomize,
            k,
        } => commands::calibrate(&calib, method, &model, alpha, randomize, k, seed, &mut out),
        Command::Predict {
            snapshot,
            test,
            alpha,
            emit_pvalues,
        } => commands::predict(&snapshot, &test, alpha, emit_pvalues, seed, cli.format, &mut out),
        Command::Simulate { config, fast } => commands::simulate(&config, fast, cli.seed, cli.format, &mut out),
        Command::Outliers { reference, tests, q } => commands::outliers(&reference, &tests, q, cli.format, &mut out),
        Command::PacR { n, alpha, delta } => commands::pac_r(n, alpha, delta, cli.format, &mut out),
    };
    out.flush()?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
