use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pgt", version, about = "Pointer-generator transformer for morphological inflection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write per-epoch checkpoints plus a manifest.
    Train(TrainArgs),
    /// Decode a test file with one checkpoint or a voting ensemble.
    Predict(PredictArgs),
    /// Score predictions against gold files.
    Evaluate(EvaluateArgs),
    /// Write an augmented training file.
    Augment {
        #[command(subcommand)]
        kind: AugmentKind,
    },
    /// Trm vs Trm-PG on subsampled training sets.
    LowresExp(LowresArgs),
}

/// Component switches. Each pair resolves to `None` when neither is given.
#[derive(Debug, Clone, Default, Args)]
pub struct ComponentFlags {
    /// Enable the copy mechanism.
    #[arg(long, overrides_with = "no_copy")]
    pub copy: bool,
    #[arg(long, overrides_with = "copy")]
    pub no_copy: bool,
    /// Add multitask reinflection pairs.
    #[arg(long, overrides_with = "no_multitask")]
    pub multitask: bool,
    #[arg(long, overrides_with = "multitask")]
    pub no_multitask: bool,
    /// Pretrain on hallucinated data for low-resource languages.
    #[arg(long, overrides_with = "no_hallucinate")]
    pub hallucinate: bool,
    #[arg(long, overrides_with = "hallucinate")]
    pub no_hallucinate: bool,
}

fn pick(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl ComponentFlags {
    pub fn copy(&self) -> Option<bool> {
        pick(self.copy, self.no_copy)
    }

    pub fn multitask(&self) -> Option<bool> {
        pick(self.multitask, self.no_multitask)
    }

    pub fn hallucinate(&self) -> Option<bool> {
        pick(self.hallucinate, self.no_hallucinate)
    }
}

/// Hyperparameter overrides shared by `train` and `lowres-exp`.
#[derive(Debug, Clone, Default, Args)]
pub struct Hyper {
    /// TOML file with `seed`, `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub components: ComponentFlags,

    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Encoder and decoder depth.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub feed_forward_dim: Option<usize>,
    #[arg(long)]
    pub attention_heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub hallucination_size: Option<usize>,
    #[arg(long)]
    pub low_resource_threshold: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Output directory for checkpoints and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the training file's basename without extension.
    #[arg(long)]
    pub lang: Option<String>,
    /// Keep only the best K checkpoints.
    #[arg(long)]
    pub keep: Option<usize>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Repeat for an ensemble.
    #[arg(long = "checkpoint", short = 'c', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Beam width; greedy when absent.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Seed for ensemble tie-breaking.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Never emit the unknown-character placeholder.
    #[arg(long)]
    pub suppress_unk: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Gold file, or a directory of `{lang}.tst` files.
    #[arg(long)]
    pub gold: PathBuf,
    /// Prediction file, or a directory of `{lang}.pred` / `{lang}.tst` files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Report file (TSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Single-file mode only.
    #[arg(long)]
    pub lang: Option<String>,
    /// Training size for grouping; read from `{lang}.trn` beside the gold file otherwise.
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long, default_value_t = pgt::augment::LOW_RESOURCE_THRESHOLD)]
    pub threshold: usize,
}

#[derive(Debug, Subcommand)]
pub enum AugmentKind {
    /// Paradigm-group reinflection pairs plus the original rows.
    Multitask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stem-replaced pseudo-examples.
    Hallucinate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = pgt::augment::DEFAULT_HALLUCINATION_SIZE)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct LowresArgs {
    /// Directory with `{lang}.trn`, `{lang}.dev` and optionally `{lang}.tst`.
    #[arg(long)]
    pub data: PathBuf,
    /// Languages to run; every `{lang}.trn` in the directory when absent.
    #[arg(long = "lang")]
    pub langs: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub sample_size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Report file (TSV).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: Hyper,
}
