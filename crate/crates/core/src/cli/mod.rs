//! Command-line front end of the `casecross` binary.

mod commands;
pub mod config;
pub mod manifest;

use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::frames::DesignKind;

#[derive(Debug, Parser)]
#[command(name = "casecross", version, about = "Bayesian overdispersed case-crossover analyses")]
pub struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate replicated synthetic datasets with their truth records.
    Simulate(SimulateArgs),
    /// Fit a model to one data file or to every replication of a simulate run.
    Fit(FitArgs),
    /// Score fitted curves against the truth: coverage, bias, width, plots.
    Evaluate(EvaluateArgs),
    /// Simulate, fit and score several scenarios in one run.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long)]
    pub output: PathBuf,
    /// Replace an earlier run's output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DesignArg {
    TimeStratified,
    Uni,
    Bidir,
}

impl From<DesignArg> for DesignKind {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::TimeStratified => DesignKind::TimeStratified,
            DesignArg::Uni => DesignKind::Unidirectional,
            DesignArg::Bidir => DesignKind::SymmetricBidirectional,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Data CSV, or the output directory of `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Fit config holding the model, frame design and fit options.
    #[arg(long, visible_alias = "model")]
    pub config: PathBuf,
    /// Sampling seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub design: Option<DesignArg>,
    #[arg(long)]
    pub control_days: Option<usize>,
    #[arg(long, value_enum)]
    pub overdispersion: Option<Switch>,
    /// JSON array of days (1-based) or ISO dates removed before frames are built.
    #[arg(long)]
    pub exclude_holidays: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Output directory of `fit` run on a simulate directory.
    #[arg(long)]
    pub fits: PathBuf,
    /// Output directory of `simulate` holding the truth records.
    #[arg(long)]
    pub truth: PathBuf,
    /// Curve to score; defaults to the simulated exposure.
    #[arg(long)]
    pub covariate: Option<String>,
    /// Label of the `scenario` column.
    #[arg(long, default_value = "scenario")]
    pub scenario: String,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutputArgs,
}

/// Failure stage of a run; each maps to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Input,
    Frames,
    Inference,
    Evaluation,
    Output,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Frames => "frames",
            Stage::Inference => "inference",
            Stage::Evaluation => "evaluation",
            Stage::Output => "output",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 3,
            Stage::Input => 4,
            Stage::Frames => 5,
            Stage::Inference => 6,
            Stage::Evaluation => 7,
            Stage::Output => 8,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub stage: Stage,
    pub message: String,
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage.name(), self.message)
    }
}

impl std::error::Error for CliError {}

pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, CliError>;
}

impl<T, E: Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            stage,
            message: e.to_string(),
        })
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError {
                stage: Stage::Config,
                message: "--jobs must be at least 1".into(),
            });
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Experiment(a) => commands::experiment(&a),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("casecross: {e}");
            e.stage.exit_code()
        }
    }
}
