//! `snclr`: pretrain, probe, and inspect soft-neighbor contrastive models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use snclr::Error;

#[derive(Parser, Debug)]
#[command(name = "snclr", version, about = "Soft neighbor contrastive learning at desk scale")]
struct Cli {
    /// Override the seed of any command; the effective seed is always reported.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder and write metrics and checkpoints.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint's frozen encoder with a kNN or linear probe.
    Probe(ProbeArgs),
    /// Show a sample's nearest neighbors and their positiveness weights.
    Neighbors(NeighborsArgs),
    /// Finite-difference check of every backward rule and the full loss.
    Gradcheck(GradcheckArgs),
    /// Write a Gaussian-cluster dataset.
    GenSynth(GenSynthArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Run config (TOML). Optional when resuming.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training data; overrides `dataset` from the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Continue from a checkpoint, using the config stored inside it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbeMode {
    Knn,
    Linear,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe training data. Also the test data unless --test or --split-every is given.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "knn")]
    pub mode: ProbeMode,
    /// Neighbors for the kNN vote.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Separate held-out data.
    #[arg(long, conflicts_with = "split_every")]
    pub test: Option<PathBuf>,
    /// Hold out every n-th sample of --dataset as the test set.
    #[arg(long)]
    pub split_every: Option<usize>,
    /// Linear probe epochs.
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Linear probe learning rate.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// File the report is appended to [default: probes.jsonl beside the checkpoint].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NeighborSource {
    /// The other samples of --dataset, projected by the momentum branch.
    Dataset,
    /// The candidate store saved in the checkpoint.
    Store,
}

#[derive(Args, Debug)]
pub struct NeighborsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Row of --dataset to query.
    #[arg(long)]
    pub index: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "dataset")]
    pub source: NeighborSource,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Neighbors per anchor.
    #[arg(long)]
    pub k: Option<usize>,
    /// Print every check, not just the summary.
    #[arg(long, short)]
    pub verbose: bool,
    /// Corrupt a backward rule; exercises the failure path.
    #[arg(long, hide = true)]
    pub fault: bool,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 400)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Per-coordinate standard deviation around each class center.
    #[arg(long, default_value_t = 0.35)]
    pub spread: f64,
}

/// Exit statuses: 0 success, 1 failed check, 2 usage or config,
/// 3 I/O, 4 corrupt artifact.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Corrupt(_) => 4,
        Error::DegenerateBatch(_) | Error::NonFinite(_) => 1,
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 2,
    }
}

fn init_threads() -> Result<(), String> {
    let threads = match std::env::var("SNCLR_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| format!("SNCLR_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Pretrain(a) => commands::pretrain(a, cli.seed),
        Command::Probe(a) => commands::probe(a, cli.seed),
        Command::Neighbors(a) => commands::neighbors(a, cli.seed),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.seed),
        Command::GenSynth(a) => commands::gen_synth(a, cli.seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
