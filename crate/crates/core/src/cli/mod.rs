//! Command-line interface: argument parsing and the subcommands.

mod bench;
mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use bench::{run_bench, write_bench, BenchConfig, BenchRow};
pub use commands::{
    coverage_report, gradcheck_model, gradcheck_model_config, CoverageReport, Prediction,
};
pub use config::{load_run_config, split_overrides, write_config, Overrides, RunConfig, SEED_ENV};

use crate::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "smart",
    version,
    about = "Shallow memory-aware Transformer for region-set captioning",
    after_help = "Config fields can be overridden with dotted flags, e.g. --model.d_model=32 \
                  --train.ce_steps=500. SMART_SEED overrides the seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (scenes, word vectors, lexicon).
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory [default: data_dir from the config]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-entropy training into run_dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint directory written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Self-critical fine-tuning of a trained run.
    FinetuneScst {
        /// Run directory of the cross-entropy phase.
        #[arg(long)]
        from: PathBuf,
        /// Output directory [default: <from>/scst]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra config layered over <from>/config.json.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Caption every scene of a feature file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Vocabulary file [default: vocab.txt next to the checkpoint]
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Beam width; 1 decodes greedily.
        #[arg(short, long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// BLEU, ROUGE-L and CIDEr-D of predictions against scene captions.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Feature file whose captions are the references.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Object coverage of predictions at several area thresholds.
    Coverage {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// [default: word_vectors.json next to the features]
        #[arg(long)]
        word_vectors: Option<PathBuf>,
        /// [default: lexicon.txt next to the features]
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.03, 0.05, 0.10])]
        thresholds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of all model gradients (small f64 model).
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Check a random subset of coordinates per parameter.
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode latency over layers x memory slots x batch size.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bench")]
        out_dir: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run(args: Vec<String>) -> Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Error::Usage(e.to_string()));
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let load =
        |file: &Option<PathBuf>| load_run_config(file.as_deref(), &overrides, env_seed.clone());
    match cli.command {
        Command::GenerateData { config, out } => commands::generate_data(&load(&config)?, out),
        Command::Train { config, resume } => commands::train(&load(&config)?, resume),
        Command::FinetuneScst { from, out, config } => {
            commands::finetune_scst(&from, out, config.as_deref(), &overrides, env_seed)
        }
        Command::Generate {
            checkpoint,
            features,
            vocab,
            k,
            max_len,
            out,
        } => commands::generate(&checkpoint, &features, vocab, k, max_len, &out),
        Command::Evaluate {
            predictions,
            references,
            out,
        } => commands::evaluate(&predictions, &references, out),
        Command::Coverage {
            predictions,
            features,
            word_vectors,
            lexicon,
            thresholds,
            out,
        } => commands::coverage(
            &predictions,
            &features,
            word_vectors,
            lexicon,
            &thresholds,
            out,
        ),
        Command::Gradcheck {
            config,
            tol,
            max_coords,
            out,
        } => commands::gradcheck(&load(&config)?, tol, max_coords, out),
        Command::Bench { config, out_dir } => commands::bench(&load(&config)?, &out_dir),
    }
}
