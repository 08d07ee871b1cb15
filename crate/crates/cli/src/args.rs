use std::path::PathBuf;

use adaptive_attention::model::{Primitive, SizeClass};
use adaptive_attention::train::Precision;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "adaptive-attn",
    version,
    about = "Adaptive-span local attention for image classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Parameter and FLOPS breakdown.
    Analyze(AnalyzeArgs),
    /// Learned spans and kernel extents of an adaptive checkpoint.
    Spans(SpansArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Collect finished runs into plot-ready CSV tables.
    ExportPlots(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrimitiveArg {
    Conv,
    Fixed,
    Adaptive,
}

impl From<PrimitiveArg> for Primitive {
    fn from(p: PrimitiveArg) -> Self {
        match p {
            PrimitiveArg::Conv => Primitive::Conv,
            PrimitiveArg::Fixed => Primitive::Fixed,
            PrimitiveArg::Adaptive => Primitive::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SizeArg {
    Small,
    Medium,
    Large,
}

impl From<SizeArg> for SizeClass {
    fn from(s: SizeArg) -> Self {
        match s {
            SizeArg::Small => SizeClass::Small,
            SizeArg::Medium => SizeClass::Medium,
            SizeArg::Large => SizeClass::Large,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradTarget {
    Ops,
    Mask,
    Attention,
    All,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub primitive: Option<PrimitiveArg>,
    #[arg(long, value_enum)]
    pub size: Option<SizeArg>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ramp: Option<usize>,
    #[arg(long)]
    pub init_span: Option<f64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct DataArgs {
    /// Directory holding train.bin and test.bin.
    #[arg(long, env = "ADAPTIVE_ATTN_DATA")]
    pub data: Option<PathBuf>,
    /// Generate a seeded stand-in dataset with this many training images.
    #[arg(long, num_args = 0..=1, default_missing_value = "50000", conflicts_with = "data")]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub span_l1: Option<f64>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resolved configuration from an earlier run; other flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Expected primitive; a different one in the checkpoint is an error.
    #[arg(long, value_enum)]
    pub primitive: Option<PrimitiveArg>,
    #[arg(long, value_enum)]
    pub size: Option<SizeArg>,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Cost a checkpoint at its current extents instead of a fresh model.
    #[arg(long, conflicts_with_all = ["primitive", "size", "heads", "ramp", "init_span"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SpansArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub target: GradTarget,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Run directories, searched recursively for summary.json.
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
