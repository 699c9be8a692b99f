//! `flowguide`: batch pipelines for guided structured-latent sampling.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 numeric failure.

mod commands;
mod config;
mod manifest;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowguide::gradcheck::GradTarget;
use flowguide::partition::{CorrespondenceMethod, DEFAULT_K};
use flowguide::ErrorKind;

/// Seed used when neither a flag nor a config file sets one.
pub const SEED_ENV: &str = "FLOWGUIDE_SEED";

#[derive(Debug, Parser)]
#[command(name = "flowguide", version, about = "Guided rectified-flow sampling over sparse voxel latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a toy query/appearance pair of latents and feature fields.
    Synth(SynthArgs),
    /// k-means one feature field, or co-segment two.
    Cluster(ClusterArgs),
    /// Match query voxels to appearance voxels.
    Correspond(CorrespondArgs),
    /// Guided sampling driven by a run config.
    Transfer(TransferArgs),
    /// Unguided sampling.
    Sample(SampleArgs),
    /// Fit a small velocity field to a toy Gaussian flow.
    TrainToy(TrainToyArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Mean-rank tables from line-delimited ranking records.
    EvalAggregate(EvalArgs),
    /// Render a latent file as a colored ASCII PLY point cloud.
    ExportPly(ExportArgs),
}

#[derive(Debug, Args)]
struct OutDir {
    /// Directory for outputs and the run manifest.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    resolution: u32,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Standard deviation of the per-voxel latent and feature noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Feature file; pass twice to co-segment two shapes.
    #[arg(long = "features", required = true, num_args = 1)]
    features: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_iters: usize,
    /// Output path [default: <out-dir>/clusters.json].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Debug, Args)]
struct CorrespondArgs {
    #[arg(long)]
    query_slat: PathBuf,
    #[arg(long)]
    query_features: PathBuf,
    #[arg(long)]
    appearance_slat: PathBuf,
    #[arg(long)]
    appearance_features: PathBuf,
    #[arg(long, value_enum, default_value = "coseg_nn")]
    mode: ModeArg,
    /// Clusters from `flowguide cluster`; computed here when absent.
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Output path [default: <out-dir>/correspondence.json].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    GlobalNn,
    CosegNn,
    GlobalPool,
}

impl From<ModeArg> for CorrespondenceMethod {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::GlobalNn => Self::GlobalNn,
            ModeArg::CosegNn => Self::CosegNn,
            ModeArg::GlobalPool => Self::GlobalPool,
        }
    }
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's sampler seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the config's guidance weight.
    #[arg(long)]
    weight: Option<f64>,
    /// [default: <out-dir>/result.slat]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: <out-dir>/result.ply]
    #[arg(long)]
    ply: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Run config; its guidance section is ignored.
    #[arg(long, conflicts_with = "query_slat", required_unless_present = "query_slat")]
    config: Option<PathBuf>,
    /// Query shape, sampled with the zero field when no config is given.
    #[arg(long)]
    query_slat: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// [default: <out-dir>/result.slat]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ply: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Affine,
    Mlp1,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    /// Component mean as comma-separated values; repeat for a mixture.
    #[arg(long, required = true, allow_hyphen_values = true)]
    mean: Vec<String>,
    /// Component standard deviation, one per --mean.
    #[arg(long, required = true)]
    std: Vec<f64>,
    #[arg(long, value_enum, default_value = "affine")]
    arch: ArchArg,
    #[arg(long, default_value_t = flowguide::toyflows::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Held-out samples for the reported metrics.
    #[arg(long, default_value_t = 10_000)]
    eval_samples: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// [default: <out-dir>/params.json]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TargetArg {
    Appearance,
    StructureComplement,
    StructureAllPairs,
    GlobalPool,
    CfmAffine,
    CfmMlp,
}

impl From<TargetArg> for GradTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Appearance => Self::Appearance,
            TargetArg::StructureComplement => Self::StructureComplement,
            TargetArg::StructureAllPairs => Self::StructureAllPairs,
            TargetArg::GlobalPool => Self::GlobalPool,
            TargetArg::CfmAffine => Self::CfmAffine,
            TargetArg::CfmMlp => Self::CfmMlp,
        }
    }
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Gradient to check; repeat for several [default: all].
    #[arg(long, value_enum)]
    target: Vec<TargetArg>,
    /// Fail above this relative error [default: 1e-5, 1e-4 for pooled and
    /// flow-matching gradients].
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Line-delimited JSON ranking records.
    #[arg(long)]
    records: PathBuf,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    lenient: bool,
    /// Average over all records instead of views-then-objects.
    #[arg(long)]
    flat: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    #[command(flatten)]
    out_dir: OutDir,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    slat: PathBuf,
    /// [default: <out-dir>/result.ply]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    out_dir: OutDir,
}

/// A command failure, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<flowguide::Error> for Failure {
    fn from(e: flowguide::Error) -> Self {
        match e.kind() {
            ErrorKind::Data => Self::Data(e.to_string()),
            ErrorKind::Numeric => Self::Numeric(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Correspond(a) => commands::correspond(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Sample(a) => commands::sample(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::EvalAggregate(a) => commands::eval_aggregate(a),
        Command::ExportPly(a) => commands::export_ply(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
