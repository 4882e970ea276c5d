use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod manifest;

use mnar_core::data::{DEFAULT_REGION_P1972, DEFAULT_REGION_P1977};
use mnar_core::diagnostics::DEFAULT_RHAT_THRESHOLD;

/// Environment variable capping the number of chain worker threads.
pub const WORKERS_ENV: &str = "MNAR_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "hes-mnar", version, about = "Smoking prevalence trends under non-ignorable non-participation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a survey with mortality follow-up from a scenario.
    Simulate(SimulateArgs),
    /// Fit the Bayesian selection model (or its MAR reduction).
    Fit(FitArgs),
    /// Split R-hat for every recorded parameter; exits 3 on failure.
    Diagnose(DiagnoseArgs),
    /// Posterior prevalence trends and parameter correlations.
    Report(ReportArgs),
    /// Compare estimators against known truth on simulated data.
    Compare(CompareArgs),
    /// Refit under several eta prior scales and report eta mixing.
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true))]
pub struct SimulateArgs {
    /// Use the bundled scenario with field-study cell sizes.
    #[arg(long, group = "source")]
    pub paper_shape: bool,
    /// Scenario JSON file.
    #[arg(long, group = "source")]
    pub scenario: Option<PathBuf>,
    /// Multiplier on the scenario's cell sizes.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Blank the region of 1972/1977 non-participants.
    #[arg(long)]
    pub mask_regions: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Mnar,
    Mar,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplerArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Mnar)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 7)]
    pub chains: usize,
    #[arg(long, default_value_t = 9000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 45_900)]
    pub iters: usize,
    #[arg(long, default_value_t = 75)]
    pub thin: usize,
    /// Metropolis sweeps over the coefficient blocks per iteration.
    #[arg(long, default_value_t = 5)]
    pub sweeps: usize,
    /// Master seed; chain k reads stream k+1.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Fill missing regions (1972/1977 non-participants) by single imputation.
    #[arg(long)]
    pub impute_region: bool,
    #[arg(long, default_value_t = DEFAULT_REGION_P1972)]
    pub region_p1972: f64,
    #[arg(long, default_value_t = DEFAULT_REGION_P1977)]
    pub region_p1977: f64,
    /// Seed for region imputation; defaults to the master seed.
    #[arg(long)]
    pub region_seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Scale of the logistic prior on the selection coefficients.
    #[arg(long, default_value_t = 1.0 / 2.05)]
    pub eta_scale: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RHAT_THRESHOLD)]
    pub threshold: f64,
    /// Only judge regression coefficients, not baseline hazards.
    #[arg(long)]
    pub coefficients_only: bool,
    /// Output directory; defaults to the fit directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Method label in the tables; defaults to Bayes+MNAR or Bayes+MAR.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Fit directory of an MNAR run.
    #[arg(long)]
    pub mnar: PathBuf,
    /// Fit directory of a MAR run.
    #[arg(long)]
    pub mar: Option<PathBuf>,
    /// Number of imputations for frequentist MI.
    #[arg(long, default_value_t = 5)]
    pub mi: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Comma-separated eta prior scales.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0 / 2.05, 2.0 / 2.05])]
    pub eta_scales: Vec<f64>,
    #[arg(long, default_value_t = 1.05)]
    pub threshold: f64,
}

/// Failure classes mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Convergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Convergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Convergence(m) => m,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    mnar_core::error::DataError,
    mnar_core::error::ModelError,
    mnar_core::error::AnalysisError,
    std::io::Error
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Report(a) => commands::report(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Sensitivity(a) => commands::sensitivity(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
