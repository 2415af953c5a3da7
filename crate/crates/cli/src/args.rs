use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taskmod::training::Regime;

#[derive(Debug, Parser)]
#[command(
    name = "taskmod",
    version,
    about = "Task-specific weight modulation for a tiny restoration transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Learn a new task's bias on a frozen checkpoint.
    Finetune(FinetuneArgs),
    /// Per-group cosine similarity between two checkpoints.
    AnalyzeSensitivity(SensitivityArgs),
    /// Singular-value energy of weight deltas under two rank strategies.
    AnalyzeRank(RankArgs),
    /// Mean PSNR per task on seeded synthetic pairs.
    Eval(EvalArgs),
    /// Restore one PNG image.
    Restore(RestoreArgs),
    /// Map an instruction to a task.
    Route(RouteArgs),
    /// Write seeded clean/degraded PNG pairs.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    PlainMixed,
    TwoStage,
    Synchronous,
    BiasOnlyFinetune,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::PlainMixed => Regime::PlainMixed,
            RegimeArg::TwoStage => Regime::TwoStage,
            RegimeArg::Synchronous => Regime::Synchronous,
            RegimeArg::BiasOnlyFinetune => Regime::BiasOnlyFinetune,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Task id, e.g. `derain`.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Optimizer settings; task specs listed here take precedence over the built-ins.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Average LayerNorm shifts in as well.
    #[arg(long)]
    pub all_params: bool,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub constant_r: usize,
    #[arg(long, default_value_t = 0.25)]
    pub proportional_p: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated task ids; defaults to every task in the checkpoint.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Task specs listed here take precedence over the built-ins.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "instruction", required_unless_present = "instruction")]
    pub task: Option<String>,
    #[arg(long)]
    pub instruction: Option<String>,
    /// Clean image for reporting PSNR.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}
