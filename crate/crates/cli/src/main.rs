mod commands;
mod files;
mod params;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::files::CliError;

#[derive(Parser)]
#[command(name = "ratefield", version, about = "Event-rate estimation under a GBM prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a GBM log-rate, a spike train and mention records.
    Simulate(SimulateArgs),
    /// Maximum-likelihood log-rate path from a spike train.
    Fit(FitArgs),
    /// Sample posterior fluctuations around a fitted path.
    Sample(SampleArgs),
    /// Perturbative marginal at one node, optionally against a sampled histogram.
    Analyze(AnalyzeArgs),
    /// Fit and sample the rate from first/last mention records.
    Indirect(IndirectArgs),
    /// Posterior over σ from the Laplace evidence.
    SigmaScan(ScanArgs),
}

/// Flags shared by every subcommand. Values given here override the config
/// file, which overrides the built-in defaults.
#[derive(Args, Serialize, Default)]
pub struct Common {
    /// JSON config file, or a run manifest whose parameters are reused.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Max-norm gradient tolerance of the Newton solver.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Initial log-rate.
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s0: Option<f64>,
    /// Number of simulated people for the mention records.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub people: Option<usize>,
    /// Constant mention rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Death rate of the mention model as a multiple of the simulated rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub death_scale: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Spike-time CSV with a `time` column.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spikes: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Fitted log-rate path CSV with `time,value` columns.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Fictitious-time step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub du: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thinning: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    /// full, linearized or flat.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// crank-nicolson, semi-implicit or newton.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    /// Probability of the pointwise band.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Time of the node whose marginal histogram is written.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_time: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Histogram half-range in units of the linear standard deviation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_time: Option<f64>,
    /// Half-width of the shape window in correlation times.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    /// Sampled histogram CSV from `sample`; its bins are reused.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<PathBuf>,
    /// Evaluate the quadratic kernel by quadrature instead of its closed
    /// symmetric form.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrature: Option<bool>,
}

#[derive(Args, Serialize)]
pub struct IndirectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Mention CSV with `i,f` columns.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mentions: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub du: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Additional shifted starting paths for the uniqueness check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra_starts: Option<usize>,
}

#[derive(Args, Serialize)]
pub struct ScanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// direct or indirect.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spikes: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mentions: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_points: Option<usize>,
    /// log-flat or flat.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(params::resolve(&a, &a.common)?),
        Command::Fit(a) => commands::fit(params::resolve(&a, &a.common)?),
        Command::Sample(a) => commands::sample(params::resolve(&a, &a.common)?),
        Command::Analyze(a) => commands::analyze(params::resolve(&a, &a.common)?),
        Command::Indirect(a) => commands::indirect(params::resolve(&a, &a.common)?),
        Command::SigmaScan(a) => commands::sigma_scan(params::resolve(&a, &a.common)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
