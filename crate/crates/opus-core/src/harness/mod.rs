//! Experiment harness: configuration, the per-step training loop, metrics
//! and trace emission, evaluation, and run comparison.

mod compare;
mod run;

pub use compare::{compare_runs, render_svg, render_table, RunSummary};
pub use run::{
    eval_domain_ppl, eval_val_loss, resume_experiment, run_experiment, score_buffer, RunOutput,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::select::SelectionConfig;
use crate::sketch::SketchConfig;

/// Where proxy mini-batches come from: the proxy-eligible holdout split, or
/// a pre-built pool file.
#[derive(Debug, Clone, PartialEq)]
pub enum ProxySource {
    RandomHoldout,
    Pool(PathBuf),
}

impl Serialize for ProxySource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ProxySource::RandomHoldout => s.serialize_str("random-holdout"),
            ProxySource::Pool(p) => s.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for ProxySource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "random-holdout" {
            ProxySource::RandomHoldout
        } else {
            ProxySource::Pool(PathBuf::from(s))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub selection: SelectionConfig,
    pub sketch: SketchConfig,
    pub corpus: PathBuf,
    pub proxy_source: ProxySource,
    pub val_fraction: f64,
    pub proxy_fraction: f64,
    /// Allow the proxy pool to overlap the training stream (never the
    /// validation split).
    pub allow_proxy_overlap: bool,
    pub include_embedding_ghosts: bool,
    /// Total update-token budget; update tokens are counted as
    /// |selected| * seq_len_train per step.
    pub token_budget: u64,
    /// Metrics/checkpoint cadence in optimizer steps.
    pub eval_interval: u64,
    /// Cap on validation sequences used per evaluation.
    pub eval_max_sequences: usize,
    pub out_dir: PathBuf,
    /// Master seed; every stream in the run is keyed off it.
    pub seed: u64,
    pub warmup_fraction: f64,
    pub lr_decay: bool,
    pub grad_accum: u64,
    /// Schedule horizon in steps; defaults to the budget-derived count.
    /// Pin it explicitly when a run will be resumed under a larger budget.
    pub schedule_steps: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: crate::data::VOCAB_SIZE,
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                seq_len_train: 64,
                seq_len_score: 32,
                seed: 0,
            },
            optimizer: OptimizerConfig::default(),
            selection: SelectionConfig::default(),
            sketch: SketchConfig::default(),
            corpus: PathBuf::new(),
            proxy_source: ProxySource::RandomHoldout,
            val_fraction: 0.1,
            proxy_fraction: 0.1,
            allow_proxy_overlap: false,
            include_embedding_ghosts: false,
            token_budget: 2_000_000,
            eval_interval: 100,
            eval_max_sequences: 64,
            out_dir: PathBuf::new(),
            seed: 0,
            warmup_fraction: 0.01,
            lr_decay: false,
            grad_accum: 1,
            schedule_steps: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.selection.validate()?;
        if self.model.vocab_size < crate::data::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must cover the byte tokenizer ({} ids)",
                crate::data::VOCAB_SIZE
            )));
        }
        if self.token_budget == 0 {
            return Err(Error::Config("token budget must be positive".into()));
        }
        if self.eval_interval == 0 || self.grad_accum == 0 || self.eval_max_sequences == 0 {
            return Err(Error::Config("intervals and counts must be >= 1".into()));
        }
        if !self.corpus.exists() {
            return Err(Error::Config(format!("corpus not found: {}", self.corpus.display())));
        }
        if let ProxySource::Pool(p) = &self.proxy_source {
            if !p.exists() {
                return Err(Error::Config(format!("proxy pool not found: {}", p.display())));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Steps the schedule is anchored to.
    pub fn total_steps(&self) -> u64 {
        self.schedule_steps.unwrap_or_else(|| {
            let per_step =
                (self.selection.target_k() * self.model.seq_len_train) as u64 * self.grad_accum;
            self.token_budget.div_ceil(per_step.max(1))
        })
    }

    /// Structural fingerprint: everything that must match for a checkpoint
    /// to resume this run. Budget and output directory are excluded so a
    /// run can be resumed under an extended budget.
    pub fn fingerprint(&self) -> u64 {
        let v = serde_json::json!({
            "model": self.model,
            "optimizer": self.optimizer,
            "selection": self.selection,
            "sketch": self.sketch,
            "corpus": self.corpus.to_string_lossy(),
            "proxy_source": self.proxy_source,
            "val_fraction": self.val_fraction,
            "proxy_fraction": self.proxy_fraction,
            "allow_proxy_overlap": self.allow_proxy_overlap,
            "include_embedding_ghosts": self.include_embedding_ghosts,
            "eval_interval": self.eval_interval,
            "eval_max_sequences": self.eval_max_sequences,
            "seed": self.seed,
            "warmup_fraction": self.warmup_fraction,
            "lr_decay": self.lr_decay,
            "grad_accum": self.grad_accum,
            "schedule_steps": self.schedule_steps,
        });
        crate::rng::hash_bytes(v.to_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_budget_and_out_dir() {
        let mut a = RunConfig::default();
        a.corpus = PathBuf::from("corpus.jsonl");
        let mut b = a.clone();
        b.token_budget = a.token_budget * 2;
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn proxy_source_serde_round_trip() {
        let rh: ProxySource = serde_json::from_str("\"random-holdout\"").unwrap();
        assert_eq!(rh, ProxySource::RandomHoldout);
        let pool: ProxySource = serde_json::from_str("\"pool.jsonl\"").unwrap();
        assert_eq!(pool, ProxySource::Pool(PathBuf::from("pool.jsonl")));
        assert_eq!(serde_json::to_string(&rh).unwrap(), "\"random-holdout\"");
    }

    #[test]
    fn config_json_round_trip_mirrors_field_names() {
        let mut cfg = RunConfig::default();
        cfg.corpus = PathBuf::from("c.jsonl");
        cfg.token_budget = 123;
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"token_budget\":123"));
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }
}
