use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use opus_core::data::read_corpus;
use opus_core::harness::{
    compare_runs, render_svg, render_table, resume_experiment, run_experiment, score_buffer,
    RunConfig,
};
use opus_core::proxy::{
    build_proxy_pool, embed_text, load_embedding_file, score_corpus, write_proxy_pool,
    EmbeddingVector, DEFAULT_EMBED_DIM,
};
use opus_core::sketch::SketchConfig;

#[derive(Parser)]
#[command(name = "opus", about = "Optimizer-induced projected utility selection lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by a structurally identical run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build a retrieval-based proxy pool from a corpus and a target set.
    BuildProxy {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON-lines target documents to retrieve against.
        #[arg(long)]
        targets: PathBuf,
        /// Token budget of the pool.
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
        embed_dim: usize,
        /// Optional precomputed target embeddings (little-endian f32 rows).
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score a buffer of documents against a proxy pool, printing
    /// first-round utilities per packed sequence.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        buffer: PathBuf,
        /// Proxy documents (JSON-lines); defaults to the buffer itself.
        #[arg(long)]
        proxy: Option<PathBuf>,
        #[arg(long, default_value_t = 8192)]
        sketch_dim: usize,
        #[arg(long, default_value_t = 42)]
        sketch_seed: u64,
    },
    /// Evaluate a checkpoint on a corpus: mean validation loss, or
    /// per-group perplexity with --by-group.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        by_group: bool,
    },
    /// Compare metrics files from finished runs.
    Compare {
        metrics: Vec<PathBuf>,
        /// Write a val-loss-vs-tokens chart to this SVG path.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Allow runs with different update-token budgets.
        #[arg(long)]
        allow_mismatch: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config).context("loading run config")?;
            let out = match resume {
                Some(ck) => resume_experiment(&cfg, &ck)?,
                None => run_experiment(&cfg)?,
            };
            println!(
                "finished: {} steps, {} update tokens ({} scored), final val loss {:.6}",
                out.steps, out.update_tokens, out.scored_tokens, out.final_val_loss
            );
            println!("metrics: {}", out.metrics_path.display());
            println!("trace:   {}", out.trace_path.display());
            println!("ckpt:    {}", out.checkpoint_path.display());
        }
        Command::BuildProxy { corpus, targets, budget, out, embed_dim, embeddings } => {
            let docs = read_corpus(&corpus)?;
            let target_embeddings: Vec<EmbeddingVector> = match embeddings {
                Some(path) => load_embedding_file(&path, embed_dim)?
                    .into_iter()
                    .map(|(_, e)| e)
                    .collect(),
                None => read_corpus(&targets)?
                    .iter()
                    .map(|d| embed_text(&d.text, embed_dim))
                    .collect(),
            };
            if target_embeddings.is_empty() {
                bail!("target set is empty");
            }
            let scored = score_corpus(&docs, &target_embeddings, embed_dim)?;
            let pool = build_proxy_pool(&scored, budget)?;
            let fingerprint = opus_core::rng::hash_bytes(
                format!("{}|{}|{budget}|{embed_dim}", corpus.display(), targets.display())
                    .as_bytes(),
            );
            write_proxy_pool(&out, &pool, fingerprint, budget)?;
            let tokens: usize = pool.iter().map(|d| d.token_count).sum();
            println!("pool: {} docs, {} tokens -> {}", pool.len(), tokens, out.display());
        }
        Command::Score { checkpoint, buffer, proxy, sketch_dim, sketch_seed } => {
            let buffer_docs = read_corpus(&buffer)?;
            let proxy_docs = match proxy {
                Some(p) => read_corpus(&p)?,
                None => buffer_docs.clone(),
            };
            let utilities = score_buffer(
                &checkpoint,
                &buffer_docs,
                &proxy_docs,
                SketchConfig { m: sketch_dim, seed: sketch_seed },
            )?;
            println!("{:>8}  {:>16}", "seq", "utility");
            for (id, u) in utilities {
                println!("{id:>8}  {u:>16.9e}");
            }
        }
        Command::Eval { checkpoint, corpus, by_group } => {
            let ckpt = opus_core::checkpoint::read_checkpoint(&checkpoint)?;
            let docs = read_corpus(&corpus)?;
            let t = ckpt.model.config.seq_len_train;
            if by_group {
                let ppl = opus_core::harness::eval_domain_ppl(&ckpt.model, &docs, t, true)?;
                println!("{:<16} {:>12}", "group", "ppl");
                for (g, v) in ppl {
                    println!("{g:<16} {v:>12.4}");
                }
            } else {
                let seqs = opus_core::data::eval_sequences(&docs, t);
                let loss = opus_core::harness::eval_val_loss(&ckpt.model, &seqs)?;
                println!("val loss {loss:.6} (ppl {:.4}) over {} sequences", loss.exp(), seqs.len());
            }
        }
        Command::Compare { metrics, svg, allow_mismatch } => {
            let rows = compare_runs(&metrics, allow_mismatch)?;
            print!("{}", render_table(&rows));
            if let Some(path) = svg {
                std::fs::write(&path, render_svg(&rows))?;
                println!("chart -> {}", path.display());
            }
        }
    }
    Ok(())
}
