use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "prn", version, about = "Prototypical residual network for anomaly detection and localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset or synthetic anomaly samples
    Synth {
        #[command(subcommand)]
        what: SynthCommand,
    },
    /// Fit prototypes, train the network and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset
    Eval(EvalArgs),
    /// Score a single image and write its anomaly heatmap
    Score(ScoreArgs),
}

/// Configuration layering: built-in defaults, then `--config`, then flags.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set model.mp=false`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write a seeded synthetic category in MVTec layout
    Dataset(SynthDatasetArgs),
    /// Write synthetic anomalies built from an indexed dataset
    Anomalies(SynthAnomaliesArgs),
}

#[derive(Debug, Args)]
pub struct SynthDatasetArgs {
    /// Output root; the category directory is created inside it
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub category: String,
    #[arg(long, default_value_t = 40)]
    pub n_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub n_test_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub n_test_anomalous: usize,
    /// Image side in pixels (a multiple of 32)
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Ea,
    Hea,
    Hoa,
    /// Cycle through the kinds enabled in the configuration
    Mixed,
}

#[derive(Debug, Args)]
pub struct SynthAnomaliesArgs {
    /// Dataset root
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub category: String,
    /// Output directory for images, masks and `manifest.csv`
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = KindArg::Mixed)]
    pub kind: KindArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub category: String,
    /// Checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of seen anomalies moved from the test split to training
    #[arg(long)]
    pub n_seen: Option<usize>,
    /// Also append the per-step log to this file
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Do not print per-step log lines
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub category: String,
    /// Output directory for `report.txt` and `scores.csv`
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one heatmap PNG per test image under `<out>/heatmaps`
    #[arg(long)]
    pub heatmaps: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Heatmap PNG
    #[arg(long)]
    pub out: PathBuf,
}
