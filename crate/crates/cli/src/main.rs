//! `pairrank` command-line driver.
//!
//! Reports go to standard output as canonical JSON; progress goes to standard
//! error. Exit status: 0 on success, 1 on operational errors, 2 on usage errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pairrank::encoder::EncoderKind;
use pairrank::rankhead::HeadVariant;

use crate::config::{RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "pairrank", version, about = "Pairwise text ranking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a synthetic planted-lexicon corpus.
    GenData,
    /// Enumerate labeled same-context pairs.
    MakePairs,
    /// Train a ranker and write a checkpoint.
    Train,
    /// List metrics and pair accuracy for a checkpoint.
    Eval,
    /// Rank the passages of one context (or of every context).
    Rank,
    /// Rank a whole corpus and cut it into class segments.
    Convert,
    /// Agreement of the ranker with publication order.
    Temporal,
    /// Train the full model and its ablations under one budget.
    Ablate,
    /// Margin and learning-rate grid search.
    Grid,
    /// Ranker versus softmax classifier on a balanced test set.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::MakePairs => "make-pairs",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Rank => "rank",
            Command::Convert => "convert",
            Command::Temporal => "temporal",
            Command::Ablate => "ablate",
            Command::Grid => "grid",
            Command::Compare => "compare",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "snake_case")]
pub enum EncoderFlag {
    MeanPool,
    TinyAttention,
}

impl From<EncoderFlag> for EncoderKind {
    fn from(e: EncoderFlag) -> Self {
        match e {
            EncoderFlag::MeanPool => EncoderKind::MeanPool,
            EncoderFlag::TinyAttention => EncoderKind::TinyAttention,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "snake_case")]
pub enum HeadFlag {
    Mlp4,
    SingleLinear,
}

impl From<HeadFlag> for HeadVariant {
    fn from(h: HeadFlag) -> Self {
        match h {
            HeadFlag::Mlp4 => HeadVariant::Mlp4,
            HeadFlag::SingleLinear => HeadVariant::SingleLinear,
        }
    }
}

/// Flags accepted by every subcommand; each overrides a configuration key.
#[derive(Args, Debug, Default)]
pub struct Flags {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream [default: 42].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for pair generation and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Corpus (JSONL, or CSV by extension).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Held-out corpus.
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    #[arg(long, global = true)]
    pub context: Option<String>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub margin: Option<f64>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub encoder: Option<EncoderFlag>,
    #[arg(long, global = true)]
    pub head: Option<HeadFlag>,
    #[arg(long, global = true, value_parser = clap::builder::BoolishValueParser::new())]
    pub shared_encoder: Option<bool>,
    #[arg(long, global = true)]
    pub hash_dims: Option<usize>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true)]
    pub segments: Option<usize>,
    /// Comma-separated segment shares, best first.
    #[arg(long, global = true)]
    pub proportions: Option<String>,
    #[arg(long, global = true)]
    pub min_items: Option<usize>,
    #[arg(long, global = true)]
    pub shard_size: Option<usize>,
    /// Synthetic corpus: number of contexts.
    #[arg(long, global = true)]
    pub contexts: Option<usize>,
    /// Synthetic corpus: passages per context.
    #[arg(long, global = true)]
    pub per_context: Option<usize>,
    /// Synthetic corpus: share of tokens replaced at random.
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    /// Synthetic corpus: five comma-separated class probabilities.
    #[arg(long, global = true)]
    pub class_probs: Option<String>,
    /// Synthetic corpus: timestamps follow the class within each context.
    #[arg(long, global = true)]
    pub temporal: bool,
    /// Synthetic corpus: exactly equal class counts.
    #[arg(long, global = true)]
    pub balanced: bool,
    #[arg(long, global = true)]
    pub classifier_lr: Option<f64>,
    /// Comma-separated classifier learning rates to choose from on validation.
    #[arg(long, global = true)]
    pub classifier_lr_grid: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.flags.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = RunConfig::resolve(&cli.flags).and_then(|cfg| commands::run(cli.command, &cfg));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try 'pairrank {} --help'.", cli.command.name());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::from(1)
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn chain(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
        last = text;
    }
    msg
}
