//! Command line front end and `/api/v1` chat service for `modgpt`.

pub mod chat;
pub mod commands;
pub mod server;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// One-line error shape shared by every command: `error: <kind>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: {}: {}", self.kind, self.message.replace('\n', " "))
    }
}

impl From<modgpt::Error> for CliError {
    fn from(e: modgpt::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "modgpt", version, about = "Meme-incorporated dialogue model tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Write a synthetic planted-topic corpus and catalog.
    Synth(SynthArgs),
    /// Split a corpus into train, valid, easy and hard test sets.
    Split(SplitArgs),
    /// Pretrain the meme projection on catalog groups.
    PretrainMemes(PretrainArgs),
    /// Pretrain the emotion head on the most frequent emotion labels.
    PretrainEmotion(PretrainArgs),
    /// Train on the multi-task objective.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Produce one response to a given history.
    Generate(GenerateArgs),
    /// Interactive terminal chat.
    Chat(ChatArgs),
    /// Serve the HTTP chat API under /api/v1.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to catalog.json next to the corpus.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub dialogues: usize,
    #[arg(long, default_value_t = 8)]
    pub memes: usize,
    #[arg(long, default_value_t = 50)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Meme ids held out for the hard test set.
    #[arg(long, value_delimiter = ',')]
    pub reserve: Vec<u32>,
    /// train,valid,easy,hard
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.05, 0.05])]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_positions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// TrainConfig JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda_emotion: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_memes: bool,
    #[arg(long)]
    pub pretrain_emotion: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint path, or a name such as `best` resolved in --run-dir.
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long, default_value = ".")]
    pub run_dir: PathBuf,
    #[arg(long, conflicts_with = "suite")]
    pub corpus: Option<PathBuf>,
    /// train, valid, easy or hard: reads the matching file from --data-dir.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long, default_value = ".")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Training corpus for the seen/unseen breakdown.
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    /// Also sample responses for BLEU and distinct-n.
    #[arg(long)]
    pub generate: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    /// One utterance per flag, alternating speakers from user 1. Use
    /// `meme:<id>` or `meme:<id> <text>` to attach a meme.
    #[arg(long = "history", required = true)]
    pub history: Vec<String>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub catalog: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "MOD_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "MOD_CATALOG")]
    pub catalog: PathBuf,
    #[arg(long, env = "MOD_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Write every session as a JSONL dialogue here on shutdown.
    #[arg(long)]
    pub sessions_out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    use commands::*;
    match cli.command {
        Command::Stats(a) => stats(&a),
        Command::Synth(a) => synth(&a),
        Command::Split(a) => split(&a),
        Command::PretrainMemes(a) => pretrain(&a, Stage::Memes),
        Command::PretrainEmotion(a) => pretrain(&a, Stage::Emotion),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Generate(a) => generate(&a),
        Command::Chat(a) => chat::run(&a),
        Command::Serve(a) => server::run(&a),
    }
}
