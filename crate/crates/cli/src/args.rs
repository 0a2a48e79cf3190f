//! Command-line grammar.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use uiwf_core::Level;

#[derive(Debug, Parser)]
#[command(
    name = "uiwf",
    version,
    about = "Screenshot dataset, training and evaluation toolkit",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOptions {
    /// Seed for every random choice; falls back to UIWF_SEED, then the
    /// config file, then 0.
    #[arg(long, global = true, env = "UIWF_SEED")]
    pub seed: Option<u64>,
    /// Increase log detail (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// TOML or JSON file with the subcommand's settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Label registry file (software TAB view per line); defaults to the
    /// built-in registry.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    /// Worker threads. The numeric kernels are single-threaded, so values
    /// above 1 are accepted but run with one worker.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: u32,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop near-duplicate frames from every video of a manifest.
    Dedup(DedupArgs),
    /// Add synthetic context-menu and selected-text frames.
    Synth(SynthArgs),
    /// Train an encoder and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print the class distribution of a manifest.
    Stats(StatsArgs),
    /// Write embeddings of a split as a flat binary with a JSON sidecar.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Dataset directory holding the frames and their manifest.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Manifest file name inside the input directory.
    #[arg(long, default_value = "manifest.jsonl")]
    pub manifest_name: String,
    /// Output manifest; frames are copied next to it when it lives outside
    /// the input directory.
    #[arg(long)]
    pub out_manifest: PathBuf,
    /// Contour area threshold in square pixels.
    #[arg(long)]
    pub tc: Option<u64>,
    /// Binarization threshold.
    #[arg(long)]
    pub tb: Option<u8>,
    /// Square Gaussian kernel size (odd).
    #[arg(long)]
    pub kg: Option<usize>,
    /// Square dilation kernel size.
    #[arg(long)]
    pub kd: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Asset directory with `menus/<software>/*.png` and `selections/*.png`.
    #[arg(long)]
    pub assets: PathBuf,
    /// Fraction of natural training frames to synthesize from.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Loss levels, comma separated (e.g. `s,sv,svc`).
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<Level>>,
    /// Level weights in the order of `--levels`.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub architecture: Option<ArchitectureArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchitectureArg {
    SingleTask,
    MultiTask,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Levels to score, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<Level>>,
    /// Head whose embeddings are scored.
    #[arg(long)]
    pub head: Option<Level>,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "svc")]
    pub level: Level,
    /// Restrict to one split.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Also write the table and provenance into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "svc")]
    pub head: Level,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Output stem; `<stem>.bin` and `<stem>.json` are written.
    #[arg(long)]
    pub out: PathBuf,
}
