//! Manual rehearsal of the planted-distribution experiment at reduced
//! budget, with selection-composition diagnostics.
//! Run: cargo test --test quality_probe -- --ignored --nocapture

use std::collections::HashMap;
use std::path::Path;

use opus_core::data::{read_corpus, split_corpus, write_corpus, TokenStream, SEPARATOR};
use opus_core::harness::{eval_val_loss, run_experiment, ProxySource, RunConfig};
use opus_core::nn::ModelConfig;
use opus_core::optim::{OptimizerConfig, OptimizerKind};
use opus_core::proxy::{build_proxy_pool, embed_text, score_corpus, write_proxy_pool};
use opus_core::select::{Policy, SelectionConfig};
use opus_core::sketch::SketchConfig;
use opus_core::synthetic::{matched_targets, planted_corpus, PlantedCorpusConfig};

const DOC_LEN: usize = 256;

fn make_corpus(dir: &Path, n_docs: usize, seed: u64) -> std::path::PathBuf {
    let docs = planted_corpus(&PlantedCorpusConfig {
        n_docs,
        doc_len: DOC_LEN,
        seed,
        ..Default::default()
    });
    let path = dir.join(format!("corpus_{seed}.jsonl"));
    write_corpus(&path, &docs).unwrap();
    path
}

/// Build a bench-proxy pool from the seed's proxy-eligible split.
fn make_pool(dir: &Path, corpus: &Path, cfg: &RunConfig, seed: u64) -> std::path::PathBuf {
    let docs = read_corpus(corpus).unwrap();
    let manifest = split_corpus(&docs, cfg.val_fraction, cfg.proxy_fraction, cfg.seed).unwrap();
    let eligible: std::collections::HashSet<&str> =
        manifest.proxy_eligible.iter().map(|s| s.as_str()).collect();
    let candidates: Vec<_> =
        docs.iter().filter(|d| eligible.contains(d.id.as_str())).cloned().collect();
    let targets = matched_targets(16, DOC_LEN, 7_000 + seed);
    let embeddings: Vec<_> = targets.iter().map(|t| embed_text(&t.text, 256)).collect();
    let scored = score_corpus(&candidates, &embeddings, 256).unwrap();
    let pool = build_proxy_pool(&scored, 40_000).unwrap();
    let path = dir.join(format!("pool_{seed}.jsonl"));
    write_proxy_pool(&path, &pool, 0, 40_000).unwrap();
    path
}

fn optimizer_choice() -> OptimizerKind {
    match std::env::var("PROBE_OPT").as_deref() {
        Ok("adamw") => OptimizerKind::Adamw,
        Ok("sgd") => OptimizerKind::Sgd,
        _ => OptimizerKind::MuonHybrid,
    }
}

fn arm_config(dir: &Path, corpus: &Path, pool: &Path, policy: Policy, seed: u64, budget: u64, out: &str) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            vocab_size: 257,
            d_model: 12,
            n_layers: 1,
            n_heads: 2,
            seq_len_train: 64,
            seq_len_score: 16,
            seed,
        },
        optimizer: OptimizerConfig { choice: optimizer_choice(), ..Default::default() },
        selection: SelectionConfig {
            buffer_size: 32,
            selection_ratio: 0.5,
            temperature: 0.9,
            proxy_batch: 4,
            policy,
            redundancy_penalty: true,
            utility_gain: std::env::var("PROBE_GAIN")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(1.0),
            rng_seed: 0,
        },
        sketch: SketchConfig { m: 8192, seed: 42 },
        corpus: corpus.to_path_buf(),
        proxy_source: ProxySource::Pool(pool.to_path_buf()),
        val_fraction: 0.06,
        proxy_fraction: 0.12,
        token_budget: budget,
        eval_interval: 100_000,
        eval_max_sequences: 64,
        out_dir: dir.join(out),
        seed,
        schedule_steps: Some(budget / (16 * 64)),
        ..Default::default()
    }
}

/// Per-step separation: (meanB - meanF) / pooled sd, plus step sd scale.
fn per_step_separation(cfg: &RunConfig, classes: &[char]) -> String {
    let trace = std::fs::read_to_string(cfg.out_dir.join("trace.jsonl")).unwrap();
    let mut seps = Vec::new();
    let mut sds = Vec::new();
    for line in trace.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let Some(r0) = v["utilities"].get("0") else { continue };
        let (mut b, mut f): (Vec<f64>, Vec<f64>) = (vec![], vec![]);
        let mut all = Vec::new();
        for pair in r0.as_array().unwrap() {
            let idx = pair[0].as_u64().unwrap() as usize;
            let u = pair[1].as_f64().unwrap();
            all.push(u);
            match classes.get(idx) {
                Some('B') => b.push(u),
                Some('F') => f.push(u),
                _ => {}
            }
        }
        if b.is_empty() || f.is_empty() {
            continue;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let m_all = mean(&all);
        let sd = (all.iter().map(|u| (u - m_all).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        if sd > 0.0 {
            seps.push((mean(&b) - mean(&f)) / sd);
            sds.push(sd);
        }
    }
    seps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |xs: &[f64], p: f64| xs[((xs.len() - 1) as f64 * p) as usize];
    format!(
        "z-sep p25/p50/p75: {:.2}/{:.2}/{:.2}  step-sd p25/p50/p75: {:.2e}/{:.2e}/{:.2e}",
        q(&seps, 0.25), q(&seps, 0.5), q(&seps, 0.75),
        q(&sds, 0.25), q(&sds, 0.5), q(&sds, 0.75)
    )
}

/// Proxy-validation loss: val-split documents from the matched grammar.
fn proxy_val_loss(corpus: &Path, cfg: &RunConfig) -> f64 {
    let docs = read_corpus(corpus).unwrap();
    let manifest = split_corpus(&docs, cfg.val_fraction, cfg.proxy_fraction, cfg.seed).unwrap();
    let by_id: HashMap<&str, &opus_core::data::Doc> =
        docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let val_b: Vec<_> = manifest
        .val
        .iter()
        .filter(|id| id.starts_with("B-"))
        .map(|id| by_id[id.as_str()].clone())
        .collect();
    let seqs = opus_core::data::eval_sequences(&val_b, cfg.model.seq_len_train);
    let ckpt = opus_core::checkpoint::read_checkpoint(&cfg.out_dir.join("ckpt.bin")).unwrap();
    eval_val_loss(&ckpt.model, &seqs).unwrap()
}

/// Map each packed sequence id to its dominant doc class (B / An / Af).
fn sequence_classes(corpus: &Path, cfg: &RunConfig) -> Vec<char> {
    let docs = read_corpus(corpus).unwrap();
    let manifest = split_corpus(&docs, cfg.val_fraction, cfg.proxy_fraction, cfg.seed).unwrap();
    let by_id: HashMap<&str, &opus_core::data::Doc> =
        docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let train: Vec<_> = manifest.train.iter().map(|id| by_id[id.as_str()].clone()).collect();
    // labels per token, then majority per sequence
    let mut labels: Vec<char> = Vec::new();
    for (i, d) in train.iter().enumerate() {
        if i > 0 {
            labels.push('?');
        }
        let class = if d.id.starts_with("B-") {
            'B'
        } else if d.id.starts_with("An-") {
            'N'
        } else {
            'F'
        };
        labels.extend(std::iter::repeat(class).take(d.text.len()));
    }
    let t = cfg.model.seq_len_train;
    let mut out = Vec::new();
    let mut start = 0;
    while start + t <= labels.len() {
        let window = &labels[start..start + t];
        let count = |c: char| window.iter().filter(|&&x| x == c).count();
        let (b, n, f) = (count('B'), count('N'), count('F'));
        out.push(if b >= n && b >= f {
            'B'
        } else if n >= f {
            'N'
        } else {
            'F'
        });
        start += t;
    }
    let _ = SEPARATOR;
    out
}

fn selected_composition(cfg: &RunConfig, classes: &[char]) -> (f64, f64) {
    let trace = std::fs::read_to_string(cfg.out_dir.join("trace.jsonl")).unwrap();
    let (mut b, mut n, mut total) = (0usize, 0usize, 0usize);
    for line in trace.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for id in v["selected"].as_array().unwrap() {
            let idx = id.as_u64().unwrap() as usize;
            match classes.get(idx) {
                Some('B') => b += 1,
                Some('N') => n += 1,
                _ => {}
            }
            total += 1;
        }
    }
    (b as f64 / total as f64, n as f64 / total as f64)
}

/// Class-conditional round-0 utility statistics over all steps.
fn utility_stats(cfg: &RunConfig, classes: &[char]) -> String {
    let trace = std::fs::read_to_string(cfg.out_dir.join("trace.jsonl")).unwrap();
    let mut per_class: HashMap<char, Vec<f64>> = HashMap::new();
    for line in trace.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(r0) = v["utilities"].get("0") {
            for pair in r0.as_array().unwrap() {
                let idx = pair[0].as_u64().unwrap() as usize;
                let u = pair[1].as_f64().unwrap();
                let class = classes.get(idx).copied().unwrap_or('?');
                per_class.entry(class).or_default().push(u);
            }
        }
    }
    let mut out = String::new();
    for c in ['B', 'F', 'N'] {
        if let Some(us) = per_class.get(&c) {
            let mean = us.iter().sum::<f64>() / us.len() as f64;
            let var = us.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / us.len() as f64;
            let mx = us.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!("  {c}: mean {mean:.3e} sd {:.3e} max {mx:.3e}", var.sqrt()));
        }
    }
    out
}

#[test]
#[ignore]
fn utility_scale() {
    let budget = 60_000u64;
    let dir = tempfile::tempdir().unwrap();
    let seed = 100;
    let corpus = make_corpus(dir.path(), 3000, seed);
    let probe = arm_config(dir.path(), &corpus, Path::new("x"), Policy::Opus, seed, budget, "x");
    let pool = make_pool(dir.path(), &corpus, &probe, seed);
    let classes = sequence_classes(&corpus, &probe);
    let cfg = arm_config(dir.path(), &corpus, &pool, Policy::Opus, seed, budget, "uscale");
    run_experiment(&cfg).unwrap();
    println!("round-0 utilities by class:\n{}", utility_stats(&cfg, &classes));
    println!("{}", per_step_separation(&cfg, &classes));
}

#[test]
#[ignore]
fn rehearsal() {
    let budget: u64 = std::env::var("PROBE_BUDGET").ok().and_then(|s| s.parse().ok()).unwrap_or(400_000);
    let seeds: u64 = std::env::var("PROBE_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    let n_docs: usize = (budget as usize / (16 * 64) * 32 * 64) / (DOC_LEN * 8 / 10) + 2000;
    let dir = tempfile::tempdir().unwrap();
    println!("budget {budget}, {seeds} seeds, corpus {n_docs} docs");

    for s in 0..seeds {
        let seed = 100 + s;
        let corpus = make_corpus(dir.path(), n_docs, seed);
        let probe_cfg = arm_config(dir.path(), &corpus, Path::new("x"), Policy::Opus, seed, budget, "x");
        let pool = make_pool(dir.path(), &corpus, &probe_cfg, seed);
        let classes = sequence_classes(&corpus, &probe_cfg);

        let mut row = format!("seed {seed}:");
        for (policy, name) in
            [(Policy::Opus, "opus"), (Policy::Greedy, "greedy"), (Policy::Random, "random")]
        {
            let cfg = arm_config(dir.path(), &corpus, &pool, policy, seed, budget, &format!("{name}_{seed}"));
            let t0 = std::time::Instant::now();
            run_experiment(&cfg).unwrap();
            let loss = proxy_val_loss(&corpus, &cfg);
            let (b_share, n_share) = selected_composition(&cfg, &classes);
            row.push_str(&format!(
                "  {name}: loss {loss:.4} selB {b_share:.2} selN {n_share:.2} ({:.0}s)",
                t0.elapsed().as_secs_f64()
            ));
        }
        println!("{row}");
    }
}
