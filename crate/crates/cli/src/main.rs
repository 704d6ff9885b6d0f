use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod exit;

use config::{RunConfig, TemperatureMode};

/// Conformal (APS) calibration, prediction sets and set-size monitoring.
#[derive(Debug, Parser)]
#[command(name = "apsmon", version, about)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = "APSMON_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Emit synthetic labeled records from a model profile.
    Simulate(SimulateArgs),
    /// Calibrate a labeled record file into a model document.
    Calibrate(CalibrateArgs),
    /// Generate one prediction set per input record.
    Predict(PredictArgs),
    /// Stream records through the set-size detector.
    Monitor(MonitorArgs),
    /// Aggregate outputs into CSV tables.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// uncertain, intermediate or overconfident (ignored if the config has a profile).
    #[arg(long, default_value = "uncertain")]
    pub profile: String,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0, conflicts_with = "segments")]
    pub severity: u8,
    #[arg(long, required_unless_present = "segments")]
    pub count: Option<usize>,
    /// Concatenated segments, e.g. `0:1000,2:1000`.
    #[arg(long)]
    pub segments: Option<String>,
    #[arg(long, env = "APSMON_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, env = "APSMON_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// off, fit or a fixed positive temperature (applies to logit records).
    #[arg(long)]
    pub temperature: Option<TemperatureMode>,
    /// Held-out labeled records for the baseline set-size statistics.
    #[arg(long)]
    pub baseline_input: Option<PathBuf>,
    /// Fail (exit 4) instead of warning when the threshold saturates.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, env = "APSMON_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// model (default), off or a fixed positive temperature.
    #[arg(long)]
    pub temperature: Option<TemperatureMode>,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, env = "APSMON_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long = "ratio")]
    pub ratio_threshold: Option<f64>,
    /// Samples needed before alarms can fire (defaults to the window).
    #[arg(long)]
    pub min_fill: Option<usize>,
    #[arg(long)]
    pub size_floor: Option<f64>,
    /// Keep the alarm raised once fired.
    #[arg(long)]
    pub latched: bool,
    #[arg(long)]
    pub no_null_rate: bool,
    #[arg(long)]
    pub temperature: Option<TemperatureMode>,
    /// Emit only the final summary record.
    #[arg(long)]
    pub summary_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Average set size per (epsilon, severity) from prediction files.
    Sizes(EntryArgs),
    /// Mean NSE and largest softmax per severity from prediction files.
    Entropy(EntryArgs),
    /// Largest-softmax histogram with threshold markers.
    Histogram(HistogramArgs),
    /// Simulated calibrate-and-evaluate sweep over severities and epsilons.
    Sweep(SweepArgs),
    /// Mean NSE per severity straight from the simulator.
    EntropySweep(EntropySweepArgs),
    /// Final monitor summary as a one-row table.
    Monitor(MonitorReportArgs),
}

#[derive(Debug, Args)]
pub struct EntryArgs {
    /// `SEVERITY=PATH` pairs of prediction files.
    #[arg(long = "entry", value_name = "SEVERITY=PATH")]
    pub entries: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    /// Prediction file whose largest-softmax values are binned.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Model documents whose thresholds become marker rows.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value_t = apsmon::metrics::DEFAULT_BIN_COUNT)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "uncertain")]
    pub profile: String,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Comma-separated error rates.
    #[arg(long, default_value = "0.05,0.1,0.2")]
    pub epsilons: String,
    #[arg(long, default_value_t = 2000)]
    pub n_cal: usize,
    #[arg(long, default_value_t = 5000)]
    pub n_test: usize,
    #[arg(long, env = "APSMON_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EntropySweepArgs {
    #[arg(long, default_value = "uncertain")]
    pub profile: String,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = apsmon::simulator::DEFAULT_ENTROPY_DRAWS)]
    pub draws: usize,
    #[arg(long, env = "APSMON_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonitorReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = RunConfig::load(cli.config.as_deref()).and_then(|config| match cli.command {
        Command::Simulate(a) => commands::simulate(a, &config),
        Command::Calibrate(a) => commands::calibrate(a, &config),
        Command::Predict(a) => commands::predict(a, &config),
        Command::Monitor(a) => commands::monitor(a, &config),
        Command::Report(r) => commands::report(r, &config),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
