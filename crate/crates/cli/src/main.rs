//! `trialign` command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use trialign::harness::{
    build_tree, cmd_eval, cmd_llm_decode, cmd_llm_train, cmd_make_conversations, cmd_pretrain, cmd_retrieve,
    PretrainOptions, RunConfig,
};

#[derive(Debug, Parser)]
#[command(name = "trialign", version, about = "Point cloud / image / text alignment runs")]
struct Cli {
    /// Run configuration (TOML). Defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output (run) directory; takes precedence over JM3D_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the alignment model into the run directory.
    Pretrain {
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Zero-shot top-1/top-5 per split plus the desk metrics.
    EvalZeroshot {
        /// Split files; defaults to the configured or generated splits.
        #[arg(long = "split")]
        splits: Vec<PathBuf>,
        /// Checkpoint to evaluate instead of the latest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank held-out clouds against a VIM1 view image.
    Retrieve {
        #[arg(long)]
        image: PathBuf,
        #[arg(short, long, default_value_t = 3)]
        k: usize,
    },
    /// Write the category tree of the configured corpus.
    BuildTree {
        /// Destination file; printed to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write instruction conversations for the caption stage.
    MakeConversations {
        /// `{id, caption}` lines to build from instead of synthetic captions.
        #[arg(long)]
        captions: Option<PathBuf>,
    },
    /// Train the point-token bridge and decode its conversations.
    LlmTrain {
        #[arg(long)]
        conversations: Option<PathBuf>,
    },
    /// Decode conversations with a trained bridge.
    LlmDecode {
        #[arg(long)]
        conversations: Option<PathBuf>,
        /// Decode report path; defaults to the run's llm/decoded.jsonl.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::desk(),
    };
    cfg.apply_env();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print_text(&serde_json::to_string_pretty(value)?)
}

fn print_text(text: &str) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{text}").context("writing to stdout")
}

/// The error chain, skipping causes already spelled out by the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let run_dir: &Path = &cfg.out_dir;
    match cli.command {
        Command::Pretrain { resume, stop_after } => {
            let report = cmd_pretrain(&cfg, PretrainOptions { resume, stop_after })?;
            eprintln!("{} epochs in {}", report.epochs_done, report.run_dir.display());
            print_json(&report.rows)
        }
        Command::EvalZeroshot { splits, checkpoint } => print_json(&cmd_eval(run_dir, &splits, checkpoint.as_deref())?),
        Command::Retrieve { image, k } => print_json(&cmd_retrieve(run_dir, &image, k)?),
        Command::BuildTree { output } => {
            let tree = build_tree(&cfg)?;
            match output {
                Some(p) => Ok(tree.save(&p)?),
                None => print_text(&tree.to_json()?),
            }
        }
        Command::MakeConversations { captions } => {
            let path = cmd_make_conversations(run_dir, captions.as_deref())?;
            print_text(&path.display().to_string())
        }
        Command::LlmTrain { conversations } => {
            let report = cmd_llm_train(run_dir, conversations.as_deref())?;
            eprintln!(
                "{}/{} exact matches, language model unchanged: {}",
                report.exact_matches(),
                report.decoded.len(),
                report.lm_checksum_before == report.lm_checksum_after
            );
            print_json(&report.decoded)
        }
        Command::LlmDecode { conversations, output } => {
            print_json(&cmd_llm_decode(run_dir, conversations.as_deref(), output.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
