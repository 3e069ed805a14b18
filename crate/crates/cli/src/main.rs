//! `diagflow` command-line runner.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diagflow::Error;

use crate::config::RunConfig;
use crate::run::Run;

#[derive(Parser)]
#[command(name = "diagflow", version, about = "Seeded inverse-design experiments with flow matching models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true, env = "DIAGFLOW_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed (overrides `seed`).
    #[arg(long, global = true, env = "DIAGFLOW_SEED")]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true, env = "DIAGFLOW_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true, env = "DIAGFLOW_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write DTLZ2 train/test CSVs and a schema file.
    GenData,
    /// Train the model (or ensemble) and write model files and losses.
    Train,
    /// Forward MSE, round-trip error and diversity summaries.
    Evaluate,
    /// Select-best, error-rejection and OOD-detection reports.
    Uq,
    /// Coordinate-ordering ablation over variants and seeds.
    Ablate,
    /// Generate designs for the label rows of a CSV.
    Generate {
        #[arg(long)]
        input: PathBuf,
        /// File name inside the output directory.
        #[arg(long, default_value = "generated.csv")]
        output: String,
    },
    /// Predict labels for the design rows of a CSV.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "predicted.csv")]
        output: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Uq => "uq",
            Command::Ablate => "ablate",
            Command::Generate { .. } => "generate",
            Command::Predict { .. } => "predict",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnsupportedMetric(_) => 2,
        Error::Numeric { .. } | Error::UndefinedCorrelation => 4,
        Error::Dimension { .. }
        | Error::Domain(_)
        | Error::Parse { .. }
        | Error::NoOodPoints
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => 3,
    }
}

fn execute(cli: Cli) -> diagflow::Result<PathBuf> {
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.common.out {
        overrides.push(format!("out={}", serde_json::Value::String(out.display().to_string())));
    }
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let mut run = Run::new(cli.command.name(), cfg)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&mut run)?,
        Command::Train => commands::train(&mut run)?,
        Command::Evaluate => commands::evaluate(&mut run)?,
        Command::Uq => commands::uq(&mut run)?,
        Command::Ablate => commands::ablate(&mut run)?,
        Command::Generate { input, output } => commands::generate(&mut run, input, output)?,
        Command::Predict { input, output } => commands::predict(&mut run, input, output)?,
    }
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(manifest) => {
            eprintln!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
