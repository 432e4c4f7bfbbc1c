//! `precise-dmi`: train the estimator, synthesize phantoms, estimate
//! metabolite maps, run baselines and precision studies.

mod commands;
mod config;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<precise_dmi::Error> for CliError {
    fn from(e: precise_dmi::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "precise-dmi", version, about = "Deuterium metabolic imaging estimation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// JSON metabolite prior file.
    #[arg(long, global = true)]
    pub priors: Option<PathBuf>,
    /// Output directory. Defaults to $PRECISE_DMI_OUT/<command>, else out/<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded, fixed-order reductions.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Fourier,
    Fit,
    Aniso,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the single-voxel estimator on synthetic FIDs.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Synthesize the numerical phantom as a dataset.
    Phantom {
        /// Target water SNR of compartment 3.
        #[arg(long)]
        snr: Option<f64>,
        /// Tumor edge length in voxels.
        #[arg(long)]
        tumor_size: Option<usize>,
        /// Add the default off-resonance hotspot.
        #[arg(long)]
        b0: bool,
        /// Add the default transmit falloff.
        #[arg(long)]
        b1: bool,
    },
    /// Metabolite maps: plain SVE at lambda 0, otherwise fine-tuned.
    Estimate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        /// Scale the data so the median water SVE amplitude is a_max/4.
        #[arg(long)]
        calibrate: bool,
    },
    /// Maps from a comparison method.
    Baseline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: BaselineMethod,
    },
    /// SNR sweep of percentage errors for one voxel.
    Montecarlo {
        /// Without weights only the Fourier (and fit) estimators run.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        precise_realizations: Option<usize>,
    },
    /// Closed-form and numeric Cramer-Rao bounds for Glx.
    Crlb,
    /// Estimated bias and SD maps of the fine-tuned estimate.
    Errormap {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Phantom { .. } => "phantom",
            Command::Estimate { .. } => "estimate",
            Command::Baseline { .. } => "baseline",
            Command::Montecarlo { .. } => "montecarlo",
            Command::Crlb => "crlb",
            Command::Errormap { .. } => "errormap",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("precise-dmi: {e}");
            ExitCode::from(e.code())
        }
    }
}

pub fn output_dir(global: &GlobalArgs, command: &str) -> PathBuf {
    if let Some(o) = &global.out {
        return o.clone();
    }
    match std::env::var_os("PRECISE_DMI_OUT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("out").join(command),
    }
}
