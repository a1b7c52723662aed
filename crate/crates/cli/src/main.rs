//! `vbsf`: command-line client of the vbsf service.
//!
//! Without `--server` an embedded server is started on a loopback port and
//! torn down on exit.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use tracing_subscriber::EnvFilter;
use vbsf_client::api::ErrorKind;
use vbsf_client::ClientError;

#[derive(Parser)]
#[command(name = "vbsf", version, about = "Streaming low-rank imputation and forecasting")]
struct Cli {
    /// Base URL of a running vbsf-server; an embedded one is used otherwise.
    #[arg(long, global = true)]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank stream.
    Synth(SynthArgs),
    /// Fit one window and save the posterior state.
    Fit(FitArgs),
    /// Fill the missing cells of a CSV matrix.
    Impute(ImputeArgs),
    /// Forecast the next columns of a CSV matrix.
    Forecast(ForecastArgs),
    /// Run a seeded experiment and write its report.
    Bench(BenchArgs),
    /// Corrupt observed cells with spike outliers.
    InjectOutliers(InjectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vb,
    Em,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON file with the base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rank cap of the model.
    #[arg(long)]
    rank: Option<usize>,
    /// Window length h (windows hold h + 1 columns).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Use the outlier-robust model.
    #[arg(long)]
    robust: bool,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Args)]
struct InputArgs {
    /// CSV matrix, one row per series, no header.
    #[arg(long)]
    input: PathBuf,
    /// Optional 0/1 CSV of the same shape; zeros hide cells.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Cell text that marks a missing value (empty cells always do).
    #[arg(long, default_value = "")]
    missing: String,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with the generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "")]
    missing: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Slide a window over the columns instead of fitting them at once.
    #[arg(long)]
    online: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured ones.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    robust: bool,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Fraction of eligible observed cells to corrupt.
    #[arg(long, default_value_t = 0.05)]
    fraction: f64,
    /// Multiple of the column mean added to the larger neighbour.
    #[arg(long, default_value_t = 0.75)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<vbsf_core::Error> for CliError {
    fn from(e: vbsf_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e.kind() {
            Some(ErrorKind::Numerical) => CliError::Numerical(e.to_string()),
            Some(ErrorKind::Internal) | None => CliError::Other(e.to_string()),
            Some(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match commands::run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
