//! `latent-critic`: generate synthetic data, fit critics and language models,
//! sample, score corpora in latent space and emit reports.

mod commands;
mod config;
mod container;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "latent-critic", version, about = "Model criticism in latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every command accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (overrides LATENT_CRITIC_SEED and the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (a directory for `synth gen` and `report covariance-csv`).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic data.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Fit a critic or a language model.
    Fit(FitArgs),
    /// Draw documents (or chains) from a fitted model.
    Sample(SampleArgs),
    /// Latent NLL / PPL of one corpus.
    Score(ScoreArgs),
    /// Compare the scores of a reference corpus and a sample corpus.
    Compare(CompareArgs),
    /// Write a diagnostic report.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Write train/val/test JSONL and ground_truth.json.
    Gen(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// 256 states, 50 segments, 51.2k/6.4k/6.4k documents.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitKind {
    Hsmm,
    MarkovLm,
    KnChain,
    Lda,
    Ctm,
    SectionPrior,
    SectionClassifier,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub kind: FitKind,
    #[command(flatten)]
    pub common: Common,
    /// Training corpus (JSONL documents; kn-chain also takes chain JSONL).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation corpus for HSMM early stopping (defaults to the training corpus).
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub num_states: Option<usize>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub num_topics: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Model file to sample from.
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub num_docs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CriticArgs {
    /// Critic model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Section classifier, when the model is a section prior.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub critic: CriticArgs,
    #[command(flatten)]
    pub common: Common,
    /// Corpus to score.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub critic: CriticArgs,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    TransitionsDot,
    ErrorsCsv,
    Outliers,
    NgramRanking,
    CovarianceCsv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub kind: ReportKind,
    #[command(flatten)]
    pub critic: CriticArgs,
    #[command(flatten)]
    pub common: Common,
    /// Corpus for `outliers`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Data corpus for `ngram-ranking` and `covariance-csv`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth {
            command: SynthCommand::Gen(a),
        } => commands::synth_gen(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Score(a) => commands::score(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &CliError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(e.exit_code() as u8)
}
