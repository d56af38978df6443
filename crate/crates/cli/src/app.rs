//! Command-line parsing and exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::pipeline::{self, EvalPaths, LiftMode};
use crate::{CliError, CliResult};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mvlift", version, about = "Lift single-view 2D motion to global 3D motion")]
struct Cli {
    /// TOML configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Lifting mode of `lift`, `eval` and `render`.
    #[arg(long, global = true, value_enum)]
    mode: Option<LiftMode>,
    /// Prints the effective configuration with every default and exits.
    #[arg(long, global = true)]
    show_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic 3D motions plus single-view 2D training and test sets.
    GenSynth,
    /// Trains the line-conditioned single-view model.
    TrainLcdm {
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Trains the multi-view model on the multi-view dataset.
    TrainMvdm {
        #[arg(long)]
        resume: bool,
    },
    /// Multi-view refinement of training inputs.
    OptimizeMv {
        /// A single input sequence id.
        #[arg(long)]
        id: Option<String>,
    },
    /// Recovers 3D motion from refined views and builds the four-view dataset.
    BuildMvdataset,
    /// Lifts 2D input sequences to 3D.
    Lift {
        /// Input 2D dataset; defaults to the synthetic test inputs.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Scores lifted sequences.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        observed: Option<PathBuf>,
    },
    /// Writes root-trajectory plots and overlay descriptions.
    Render {
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

impl Command {
    fn takes_mode(&self) -> bool {
        matches!(self, Command::Lift { .. } | Command::Eval { .. } | Command::Render { .. })
    }
}

enum Failure {
    Usage(String),
    Runtime(CliError),
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cfg: &PipelineConfig, command: Command, mode: LiftMode) -> CliResult<()> {
    match command {
        Command::GenSynth => pipeline::gen_synth(cfg).map(drop),
        Command::TrainLcdm { resume } => pipeline::train_lcdm(cfg, resume).map(drop),
        Command::TrainMvdm { resume } => pipeline::train_mvdm(cfg, resume).map(drop),
        Command::OptimizeMv { id } => pipeline::optimize_mv(cfg, id.as_deref()).map(drop),
        Command::BuildMvdataset => pipeline::build_mvdataset(cfg).map(drop),
        Command::Lift { input } => pipeline::lift(cfg, mode, input.as_deref()).map(drop),
        Command::Eval {
            predictions,
            ground_truth,
            observed,
        } => {
            let paths = EvalPaths {
                predictions,
                ground_truth,
                observed,
            };
            let (_, report) = pipeline::eval(cfg, mode, &paths)?;
            print!("{}", report.summary_text());
            Ok(())
        }
        Command::Render { id, predictions } => {
            pipeline::render_predictions(cfg, mode, id.as_deref(), predictions.as_deref()).map(drop)
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    if cli.threads == Some(0) {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    let cfg = load_config(&cli)?;
    if cli.show_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| Failure::Usage("a subcommand is required (see --help)".into()))?;
    if cli.mode.is_some() && !command.takes_mode() {
        return Err(Failure::Usage("--mode applies only to lift, eval and render".into()));
    }
    let mode = cli.mode.unwrap_or(LiftMode::Full);
    match cli.threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| CliError::Invalid(format!("cannot start {k} worker threads: {e}")))?;
            pool.install(|| dispatch(&cfg, command, mode))?;
        }
        None => dispatch(&cfg, command, mode)?,
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
