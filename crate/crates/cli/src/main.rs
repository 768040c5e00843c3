mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tts4pretrain::Error;

/// Joint speech/text pretraining experiments at desk scale.
#[derive(Parser, Debug)]
#[command(name = "tts4p", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON experiment config; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set encoder.d_model=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for batch construction and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Start from the desk-scale preset instead of the full-size defaults.
    #[arg(long, global = true)]
    pub desk: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a toy language, lexicon, rendered speech and manifests.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
        /// Unlabeled pretraining utterances.
        #[arg(long)]
        n_utts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Speech-only pretraining, then joint pretraining initialized from it.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = commands::PretrainPhase::Both)]
        phase: commands::PretrainPhase,
        /// Checkpoint to continue from (joint phase only).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Text pool for synthesis; defaults to `unspoken.txt` in the data dir.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Fine-tune a fresh decoder (and the encoder) on labeled data, then score the test split.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretrained checkpoint; omit to train from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Transcribe a manifest with a fine-tuned checkpoint.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output file of `id<TAB>hypothesis` lines; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write `id<TAB>reference` lines here.
        #[arg(long)]
        refs: Option<PathBuf>,
    },
    /// Corpus WER between line-aligned reference and hypothesis files.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Rank a text pool by in-domain versus background log-likelihood per token.
    SelectText {
        #[arg(long)]
        in_domain: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an n-gram LM and write it in ARPA format.
    TrainLm {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `lm.fusion_order`.
        #[arg(long)]
        order: Option<usize>,
        /// Character tokens instead of words.
        #[arg(long)]
        chars: bool,
    },
    /// Synthesize log-mel features for one sentence.
    Synth {
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
        /// Lexicon directory (with lexicon.tsv and phones.txt); the built-in toy lexicon otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Convert a metrics CSV into a whitespace-separated data file for gnuplot.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status for each error category.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn category(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        4 => "numeric",
        _ => "data",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
