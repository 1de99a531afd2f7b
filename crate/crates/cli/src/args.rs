use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvhash::data::SplitPart;
use mvhash::model::{Ablation, Fusion};
use mvhash::retrieval::Cutoff;
use mvhash::train::Optimizer;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mvhash", version, about = "Multi-view hashing: train, encode, index, query, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic multi-view dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint, metrics CSV and run record.
    Train(TrainArgs),
    /// Compute binary codes for one split.
    Encode(EncodeArgs),
    /// Pack a codes file with the split's labels into a code bank.
    Index(IndexArgs),
    /// Rank a bank for query codes by Hamming distance.
    Query(QueryArgs),
    /// mAP and precision@R of query codes against a bank.
    Eval(EvalArgs),
    /// Train and evaluate the ablation variants at each code length.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Encode(_) => "encode",
            Command::Index(_) => "index",
            Command::Query(_) => "query",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::Synth(a) => Some(a.seed),
            Command::Train(a) => Some(a.train.seed),
            Command::Ablate(a) => Some(a.train.seed),
            _ => None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    /// Width per view; a single value applies to every view.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Share of noise coordinates per view; a single value applies to every view.
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    pub noise: Vec<f64>,
    /// Fraction of noise variance shared across views.
    #[arg(long, default_value_t = 0.0)]
    pub correlation: f64,
    #[arg(long, default_value_t = 1)]
    pub labels_min: usize,
    #[arg(long, default_value_t = 1)]
    pub labels_max: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Train split size; defaults to 60% of samples.
    #[arg(long)]
    pub train: Option<usize>,
    /// Retrieval split size; defaults to 30% of samples.
    #[arg(long)]
    pub retrieval: Option<usize>,
    /// Query split size; defaults to the remainder.
    #[arg(long)]
    pub query: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    WeightedSum,
    Concat,
}

/// Architecture flags shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// Embedding width.
    #[arg(long = "dim", default_value_t = 512)]
    pub dim: usize,
    #[arg(long, overrides_with = "no_gate")]
    pub gate: bool,
    #[arg(long, overrides_with = "gate")]
    pub no_gate: bool,
    #[arg(long, overrides_with = "no_adaptive")]
    pub adaptive: bool,
    #[arg(long, overrides_with = "adaptive")]
    pub no_adaptive: bool,
    #[arg(long, overrides_with = "no_dilation")]
    pub dilation: bool,
    #[arg(long, overrides_with = "dilation")]
    pub no_dilation: bool,
    /// Indices of the views to use; all by default.
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = FusionKind::WeightedSum)]
    pub fusion: FusionKind,
    /// One gate shared by all views.
    #[arg(long)]
    pub shared_gate: bool,
}

impl ModelArgs {
    /// Concat fusion has no view weights, so adaptive weighting is off for
    /// it unless asked for (which then fails validation).
    pub fn ablation(&self) -> Ablation {
        let fusion = match self.fusion {
            FusionKind::WeightedSum => Fusion::WeightedSum,
            FusionKind::Concat => Fusion::Concat,
        };
        Ablation {
            use_gate: !self.no_gate,
            use_adaptive: if fusion == Fusion::Concat { self.adaptive } else { !self.no_adaptive },
            use_dilation: !self.no_dilation,
            views_enabled: self.views.clone(),
            fusion,
            shared_gate: self.shared_gate,
        }
    }
}

/// Optimisation flags shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long = "batch", default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Adam)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// "all" or a positive rank.
    #[arg(long, default_value = "all")]
    pub map_cutoff: Cutoff,
    /// Evaluate query-vs-retrieval mAP every N epochs (0 disables).
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    /// Skip i = j pairs in the similarity loss.
    #[arg(long)]
    pub no_diagonal: bool,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Record wall-clock seconds per epoch (makes the CSV run-dependent).
    #[arg(long)]
    pub record_time: bool,
}

impl TrainFlags {
    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::default(),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Code length.
    #[arg(long, default_value_t = 16)]
    pub bits: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Continue from this checkpoint; --epochs is the total target.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write curves.svg with the loss and mAP curves.
    #[arg(long)]
    pub svg: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, retrieval or query.
    #[arg(long, default_value = "query")]
    #[serde(serialize_with = "ser_part")]
    pub split: SplitPart,
    /// Output codes file.
    #[arg(long)]
    pub out: PathBuf,
}

fn ser_part<S: serde::Serializer>(p: &SplitPart, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match p {
        SplitPart::Train => "train",
        SplitPart::Retrieval => "retrieval",
        SplitPart::Query => "query",
    })
}

#[derive(Args, Debug, Serialize)]
pub struct IndexArgs {
    /// Codes file written by `encode`.
    #[arg(long)]
    pub codes: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split the codes were computed for.
    #[arg(long, default_value = "retrieval")]
    #[serde(serialize_with = "ser_part")]
    pub split: SplitPart,
    /// Output bank file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Codes file or bank holding the query codes.
    #[arg(long)]
    pub queries: PathBuf,
    /// Query rows to run; all by default.
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<usize>>,
    /// Results per query.
    #[arg(long, short = 'r', default_value_t = 10)]
    pub top: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Bank of query codes with labels.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value = "all")]
    pub map_cutoff: Cutoff,
    /// Output report JSON; precision@R CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Code lengths to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    pub bits: Vec<usize>,
    #[arg(long = "dim", default_value_t = 512)]
    pub dim: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}
