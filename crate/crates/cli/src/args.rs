use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hepeval", version, about = "Hepatic segmentation evaluation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command. Flags override the config file.
#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON configuration with optional `loss`, `eval` and `jobs` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Voxel connectivity for lesion components.
    #[arg(long, global = true, value_parser = ["6", "18", "26"])]
    pub connectivity: Option<String>,
    /// Soft-skeleton iterations for clDice.
    #[arg(long = "skeleton-iters", global = true)]
    pub skeleton_iters: Option<usize>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed overriding the one in a phantom spec.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate predicted label volumes against ground truth.
    Eval(EvalArgs),
    /// Generate a phantom and optionally a degraded prediction.
    Phantom(PhantomArgs),
    /// Combined training loss of a probability volume at one epoch.
    Loss(LossArgs),
    /// Skeleton, graph and central/peripheral split of a vessel mask.
    Skeleton(SkeletonArgs),
    /// Mann-Whitney U tests between two per-case CSV tables.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth label volumes.
    #[arg(long, num_args = 1.., required = true)]
    pub gt: Vec<PathBuf>,
    /// Predicted label volumes, paired with `--gt` by position.
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom job JSON (`phantom` spec and optional `degrade` spec); the
    /// default spec when omitted.
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Probability volume.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth mask, or label volume with `--label`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub epoch: usize,
    /// Take the ground truth as this label of a label volume.
    #[arg(long)]
    pub label: Option<u8>,
}

#[derive(Debug, Args)]
pub struct SkeletonArgs {
    /// Binary vessel mask.
    pub mask: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Per-case CSV of the first group (`cases.csv` written by `eval`).
    pub a: PathBuf,
    /// Per-case CSV of the second group.
    pub b: PathBuf,
}
