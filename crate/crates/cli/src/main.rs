use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ksm_core::baselines::StrategySpec;
use ksm_core::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "ksm", version, about = "Continual learning with kernel-wise soft masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a task sequence and write ledgers, checkpoint and mask files.
    Run(RunArgs),
    /// Per-layer mask statistics and storage overhead of mask files.
    Stats(StatsArgs),
    /// Evaluate one saved task against a backbone checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

/// Where task data comes from; shared by `run` and `eval`.
#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    dataset: DatasetKind,
    /// Number of tasks in the sequence.
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, default_value_t = 2)]
    classes_per_task: usize,
    /// Seeds the class split, synthetic data and training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding the extracted CIFAR binary archives.
    #[arg(long, env = "KSM_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 8)]
    image_size: usize,
    /// Training images per class for synthetic data.
    #[arg(long, default_value_t = 64)]
    train_per_class: usize,
    #[arg(long, default_value_t = 32)]
    test_per_class: usize,
    /// Synthetic class separation relative to unit pixel noise.
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "ksm", value_parser = parse_strategy)]
    strategy: StrategySpec,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Task id trained from scratch first.
    #[arg(long, default_value_t = 1)]
    init_task: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Backbone preset: desk, small or tiny. Defaults to tiny for synthetic
    /// data and desk otherwise.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long, default_value_t = 20.0)]
    k: f64,
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,
    #[arg(long, default_value_t = 0.01)]
    init_value: f64,
    /// Add Gumbel noise to the two-class logits during mask training.
    #[arg(long)]
    gumbel: bool,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Take kernel sizes from this checkpoint instead of --kernel-size.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    #[arg(long, value_enum, default_value = "table")]
    format: StatsFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StatsFormat {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Task id to evaluate; defaults to the id stored in the mask file.
    #[arg(long)]
    task: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<StrategySpec, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = StrategySpec::ALL.iter().filter_map(|s| s.cli_name()).collect();
        format!("unknown strategy {s:?}; expected one of {}", names.join(", "))
    })
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_HASH: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_FAILURE;
    };
    match e {
        Error::HashMismatch(_) => EXIT_HASH,
        Error::DataMissing(_)
        | Error::Format(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::CountMismatch(_) => EXIT_DATA,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_DATA,
        Error::Config(_) | Error::InsufficientClasses { .. } | Error::UnknownStrategy(_) | Error::UnknownTask(_) => {
            EXIT_USAGE
        }
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => commands::run(args),
        Command::Stats(args) => commands::stats(args),
        Command::Eval(args) => commands::eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = exit_code(&e);
            if code == EXIT_USAGE {
                eprintln!("see `ksm --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}
