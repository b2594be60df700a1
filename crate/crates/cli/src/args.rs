use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "qbestd", version, about = "Query-by-example spoken term detection", args_override_self = true)]
pub struct Cli {
    /// key=value file of flag defaults; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Write a seeded synthetic dataset.
    Generate(GenerateArgs),
    /// Extract 39-dim MFCC feature files from 16-bit mono WAVs.
    Featurize(FeaturizeArgs),
    /// Add normalized DTW teacher scores to a manifest.
    Teacher(TeacherArgs),
    Train(TrainArgs),
    /// Rank segments for every query.
    Search(SearchArgs),
    /// MAP of a rankings file or of a model on listed pairs.
    Eval(EvalArgs),
    /// Dump attention traces and localization statistics.
    Attention(AttentionArgs),
    /// Time DTW against the network.
    Bench(BenchArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Featurize(_) => "featurize",
            Command::Teacher(_) => "teacher",
            Command::Train(_) => "train",
            Command::Search(_) => "search",
            Command::Eval(_) => "eval",
            Command::Attention(_) => "attention",
            Command::Bench(_) => "bench",
        }
    }
}

pub const COMMANDS: [&str; 8] = ["generate", "featurize", "teacher", "train", "search", "eval", "attention", "bench"];

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub keywords: Option<usize>,
    #[arg(long)]
    pub pairs_per_keyword: Option<usize>,
    #[arg(long)]
    pub test_pairs_per_keyword: Option<usize>,
    /// Keywords kept out of training entirely.
    #[arg(long)]
    pub holdout_keywords: Option<usize>,
    #[arg(long)]
    pub queries_per_keyword: Option<usize>,
    #[arg(long)]
    pub test_queries_per_keyword: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub nuisance_dims: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub segment_min: Option<usize>,
    #[arg(long)]
    pub segment_max: Option<usize>,
    #[arg(long)]
    pub frame_period: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturizeArgs {
    #[arg(required = true)]
    pub wavs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TeacherArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Distance::Cosine)]
    pub distance: Distance,
    /// Also write raw DTW results as CSV.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Distill,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorArg {
    Cos,
    Nn,
    NnCos,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingArg {
    Attention,
    LastFrame,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorQueryArg {
    Original,
    LastHop,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path, rewritten whenever validation loss improves.
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON; defaults to the checkpoint path with `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Supervised)]
    pub mode: Mode,
    #[arg(long, default_value_t = 1)]
    pub hops: usize,
    #[arg(long, value_enum, default_value_t = DetectorArg::Nn)]
    pub detector: DetectorArg,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Use the full-size 2 x 128 architecture instead of the desk model.
    #[arg(long)]
    pub reference: bool,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Comma-separated detector layer widths ending in 2.
    #[arg(long, value_delimiter = ',')]
    pub detector_widths: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = PoolingArg::Attention)]
    pub pooling: PoolingArg,
    #[arg(long, value_enum, default_value_t = DetectorQueryArg::Original)]
    pub detector_query: DetectorQueryArg,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Weight of min-max normalized DTW scores fused with the model's.
    #[arg(long, value_name = "W")]
    pub fuse_dtw: Option<f64>,
    /// Score only the pairs listed in the manifest instead of every
    /// query against every segment.
    #[arg(long)]
    pub listed_pairs: bool,
    /// Re-encode the segment for every query.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Rankings CSV written by `search`.
    #[arg(long, conflicts_with_all = ["manifest", "checkpoint", "dtw"])]
    pub rankings: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, conflicts_with = "dtw")]
    pub checkpoint: Option<PathBuf>,
    /// Score the listed pairs with DTW instead of a model.
    #[arg(long)]
    pub dtw: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Report JSON; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttentionArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Histogram bin width in seconds.
    #[arg(long, default_value_t = 0.25)]
    pub bin_width: f64,
    /// Half-width in seconds around the keyword span that counts as inside.
    #[arg(long, default_value_t = 0.5)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Model to time; a freshly initialized desk model when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub reference: bool,
    #[arg(long, default_value_t = 39)]
    pub feature_dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [500, 1000, 2000, 4000])]
    pub m_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [25, 50, 100, 200])]
    pub n_values: Vec<usize>,
    #[arg(long, default_value_t = 4000)]
    pub fixed_m: usize,
    #[arg(long, default_value_t = 100)]
    pub fixed_n: usize,
    #[arg(long, default_value_t = 3)]
    pub hops: usize,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}
