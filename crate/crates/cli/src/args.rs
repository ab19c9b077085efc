use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tema", version, about = "Entity-mapping composed image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a triplet file.
    Eval(EvalArgs),
    /// Rank candidates for one query of a triplet file.
    Retrieve(RetrieveArgs),
    /// Train and evaluate once per value of a hyper-parameter grid.
    Sweep(SweepArgs),
    /// Modification-text length statistics per split.
    Stats(StatsArgs),
    /// Write a synthetic triplet file.
    GenSynth(GenArgs),
    /// Finite-difference check of every primitive and of the objective.
    Gradcheck(GradcheckArgs),
    /// Parameter and per-query MAC counts.
    CountParams(CountArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Json,
}

/// Overrides shared by every command that builds a training configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML file with training configuration keys; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to TEMA_SEED, then the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Feature width D.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Comma-separated components to disable, e.g. `pa,ortho_txt`.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Image features from a TEF1 embedding file instead of the synthetic encoder.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Number of entity channels N.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Checkpoint path.
    #[arg(long, default_value = "tema.ckpt")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "on")]
    pub exclude_reference: Toggle,
    /// Report kind (plain, fashion, cirr); detected from the data by default.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: Format,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Id of the query record.
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, value_enum, default_value = "on")]
    pub exclude_reference: Toggle,
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated distillation weights.
    #[arg(long, conflicts_with = "channels")]
    pub kappa: Option<String>,
    /// Comma-separated channel counts.
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long, value_enum, default_value = "on")]
    pub exclude_reference: Toggle,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// plain, cirr or fashion.
    #[arg(long, default_value = "cirr")]
    pub kind: String,
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub channels: Option<usize>,
}
