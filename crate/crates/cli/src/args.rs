use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "npp", version, about = "Relevance-guided class unlearning workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier on the training split (optionally without one class).
    Train(TrainArgs),
    /// Rank the neurons of one layer by relevance to a class over probe samples.
    Analyze(AnalyzeArgs),
    /// Mask the leading neurons of a saved neuron set.
    Perturb(PerturbArgs),
    /// Analyze and perturb in one go, then report metrics.
    Unlearn(UnlearnArgs),
    /// Compare saved models on A_t, A_g and Fr.
    Evaluate(EvaluateArgs),
    /// Grid over rules, k and m_p; one CSV row per combination.
    Sweep(SweepArgs),
    /// Write relevance heatmaps for test samples.
    Attribute(AttributeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long = "data", env = "NPP_DATA_DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    /// Class to unlearn.
    #[arg(long = "class")]
    pub class: usize,
    /// Number of held-out probe samples drawn from the test split.
    #[arg(long = "probe-n", default_value_t = 36)]
    pub probe_n: usize,
    /// Explicit probe samples (IDX images file) instead of drawing from the test split.
    #[arg(long, requires = "probe_labels")]
    pub probe_images: Option<PathBuf>,
    /// Labels for `--probe-images`.
    #[arg(long, requires = "probe_images")]
    pub probe_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalysisArgs {
    /// epsilon, gamma+epsilon, alpha1beta0 or alpha2beta1.
    #[arg(long, default_value = "epsilon")]
    pub rule: String,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Dense layer index to analyse; defaults to the last hidden dense layer.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MiaArgs {
    /// Calibration samples per side for the membership-inference attack.
    #[arg(long, default_value_t = 1000)]
    pub mia_n: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// mlp-<w1>-<w2>..., or conv.
    #[arg(long, default_value = "mlp-500")]
    pub arch: String,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave this class out of the training data.
    #[arg(long)]
    pub exclude_class: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub neuron_set: PathBuf,
    /// Fraction of the layer width to perturb.
    #[arg(long)]
    pub mp: f64,
    /// zero, gauss[:factor] or laplace[:factor].
    #[arg(long, default_value = "zero")]
    pub mode: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct UnlearnArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub mp: f64,
    #[arg(long, default_value = "zero")]
    pub mode: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub mia: MiaArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Models to compare; rows are named after the file stems.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long = "class")]
    pub class: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub mia: MiaArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// report.json destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub probe: ProbeArgs,
    #[arg(long, value_delimiter = ',', default_value = "epsilon,gamma+epsilon,alpha1beta0,alpha2beta1")]
    pub rules: Vec<String>,
    #[arg(long = "k", value_delimiter = ',', default_value = "50")]
    pub ks: Vec<usize>,
    #[arg(long = "mp", value_delimiter = ',', default_value = "0,0.04,0.08,0.12,0.16,0.2")]
    pub mps: Vec<f64>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value = "zero")]
    pub mode: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub mia: MiaArgs,
    /// Parallel jobs; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Test-split sample indices.
    #[arg(long = "index", value_delimiter = ',', required = true)]
    pub indices: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "epsilon,gamma+epsilon,alpha1beta0,alpha2beta1")]
    pub rules: Vec<String>,
    /// Class whose relevance is explained; defaults to each sample's label.
    #[arg(long = "class")]
    pub class: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}
