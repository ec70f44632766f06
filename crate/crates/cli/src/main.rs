use std::path::PathBuf;

use anyhow::{Context, Result};
use cag_core::harness::{cmd_eval, cmd_gen, cmd_train, cmd_trace, RunConfig};
use cag_core::synth::Split;
use clap::{Parser, Subcommand};

/// Overrides the seed of a run config when set.
const SEED_ENV: &str = "CAG_SEED";

#[derive(Parser)]
#[command(name = "cag", version, about = "Context-aware graph visual dialog: data, training, evaluation, traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialog corpus from a manifest.
    Gen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing corpus files.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes log.jsonl and the best checkpoint into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank metrics of a checkpoint on one split, as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Comma-separated ablations applied at evaluation time.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Corpus directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Export the attention and graph trace of one dialog.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dialog: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={seed:?} is not an unsigned integer"))?;
        log::info!("seed overridden to {} by {SEED_ENV}", cfg.seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { manifest, out, force } => {
            let stats = cmd_gen(&manifest, &out, force).context("generating corpus")?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train { config, corpus, out } => {
            let cfg = load_config(&config)?;
            let outcome = cmd_train(cfg, &corpus, &out).context("training")?;
            match outcome.best {
                Some(best) => println!(
                    "best epoch {}: val MRR {:.4} R@1 {:.4} R@5 {:.4} R@10 {:.4} Mean {:.3}",
                    best.epoch, best.mrr, best.r1, best.r5, best.r10, best.mean
                ),
                None => println!("no epochs run; initial parameters saved"),
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("log {}", outcome.log.display());
        }
        Command::Eval {
            ckpt,
            split,
            ablate,
            corpus,
        } => {
            let report = cmd_eval(&ckpt, split, corpus.as_deref(), &ablate).context("evaluating")?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Trace {
            ckpt,
            dialog,
            out,
            corpus,
        } => {
            let trace = cmd_trace(&ckpt, &dialog, &out, corpus.as_deref()).context("tracing")?;
            println!(
                "wrote {} ({} steps, rank {}, top objects {:?})",
                out.display(),
                trace.steps.len(),
                trace.rank,
                trace.top_objects
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
