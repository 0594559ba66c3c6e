//! Pipeline driver for the prompt rewriting workbench: pair construction,
//! vocabulary building, splitting, supervised and reinforcement training,
//! evaluation, single-prompt rewriting, and report comparison.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "promptforge",
    version,
    about = "Trains and runs a small policy that rewrites unsafe image prompts"
)]
struct Cli {
    /// run configuration file
    #[arg(long, global = true, default_value = "promptforge.toml")]
    config: PathBuf,
    /// override a config key, e.g. --set sft.learning_rate=1e-3 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// upper bound on worker parallelism
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// build the token vocabulary from the world lexicon and the pair file
    BuildVocab,
    /// construct toxic/clean prompt pairs and write them to the data dir
    MakePairs {
        /// where pairs come from: a chat endpoint or the synthetic sampler
        #[arg(long, value_enum)]
        source: PairSource,
    },
    /// shuffle and split the pair file into train, reinforce, and eval sets
    Split,
    /// supervised fine-tuning of the rewriting policy on the paired split
    Sft,
    /// reinforcement stage starting from the supervised checkpoint
    Ppo,
    /// score eval prompts against the world, optionally rewritten first
    Eval {
        /// policy checkpoint used to rewrite prompts before scoring
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// report file name under the report dir
        #[arg(long)]
        out: Option<String>,
    },
    /// rewrite one prompt with a trained checkpoint and print the result
    Rewrite {
        /// prompt text to rewrite
        #[arg(long)]
        prompt: String,
        /// policy checkpoint to decode with
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// print metric deltas between two evaluation reports
    Compare {
        /// baseline report path
        a: PathBuf,
        /// candidate report path
        b: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PairSource {
    /// request rewrites from the configured chat endpoint
    Llm,
    /// sample pairs from the world's lexicon
    Synthetic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
