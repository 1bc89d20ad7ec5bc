use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "affectune", version, about = "Emotion-conditioned MIDI generation from text")]
pub struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate config and inputs, then stop without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for a training stage.
#[derive(Debug, Clone, Default, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Write a checkpoint every N epochs (0: final only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConditionArg {
    /// Frozen text-encoder embedding of the story text.
    Text,
    /// Learned per-quadrant vector.
    Label,
    /// No condition.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Sample without the grammar mask.
    #[arg(long)]
    pub unconstrained: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MIDI file to a REMI token file.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// REMI token file to a MIDI file.
    Detokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a token file against the REMI grammar.
    ValidateTokens {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Place the GoEmotions categories in valence-arousal quadrants.
    MapEmotions {
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Mapping as JSON; the summary goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pair texts with same-quadrant clips and write the dataset manifest.
    BuildDataset {
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        texts: Option<PathBuf>,
        #[arg(long)]
        clips: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unconditioned decoder pretraining on a MIDI corpus.
    Pretrain {
        /// Directory of MIDI files or a clip manifest.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Pick the pretraining checkpoint whose samples best match the corpus.
    SelectPretrainCkpt {
        /// Directory holding `*.ckpt` files.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive training of the text encoder on quadrant labels.
    TrainEncoder {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Conditioned fine-tuning of the last decoder layer.
    Finetune {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Pretrained decoder checkpoint.
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        condition: ConditionArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Pick the fine-tuning checkpoint closest to reference quadrant metrics.
    SelectFinetuneCkpt {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        condition: ConditionArg,
        /// Reference metrics JSON from `evaluate --emit-metrics`.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        per_quadrant: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate MIDI files per quadrant from dataset texts.
    Generate {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        condition: ConditionArg,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Files per quadrant.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Per-quadrant musical metrics and valence/arousal tests.
    Evaluate {
        /// Output directory of `generate`.
        #[arg(long, conflicts_with = "clips")]
        generated: Option<PathBuf>,
        /// Clip manifest to evaluate instead of generated files.
        #[arg(long)]
        clips: Option<PathBuf>,
        /// Reference metrics JSON.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Report file (table followed by one JSON record per quadrant).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the per-quadrant metrics as JSON, usable as a reference.
        #[arg(long)]
        emit_metrics: Option<PathBuf>,
    },
    /// Build listening-study trials from generated files.
    BuildTrials {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the listening study over HTTP.
    ServeStudy {
        #[arg(long)]
        trials: PathBuf,
        /// Directory the trial clip paths are relative to.
        #[arg(long)]
        generated: PathBuf,
        /// Append-only response log.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        addr: Option<String>,
    },
    /// Score logged study responses.
    ScoreStudy {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Write a small synthetic corpus (lexicon, texts, labelled clips).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clips_per_quadrant: usize,
        #[arg(long, default_value_t = 40)]
        texts_per_quadrant: usize,
        #[arg(long, default_value_t = 4)]
        bars: u32,
    },
}
