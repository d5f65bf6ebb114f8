//! Minimal autoregressive transformer with a manual forward/backward pass.
//!
//! Pre-norm blocks with RMS normalization, causal single-softmax attention,
//! a GELU MLP with 4x expansion, and an embedding table tied to the output
//! head. Every 2-D block weight exposes ghost factors `(A, B)` such that
//! `A^T B` is the per-sample weight gradient.

mod ghost;
mod model;

pub use ghost::{GhostFactors, LayerGhosts};
pub use model::{BackwardOutput, ForwardPass};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable identifier of a registered parameter (its position in the registry).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId(pub u32);

impl LayerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
    /// Salt used by per-layer hash families.
    pub fn salt(self) -> u64 {
        0x4c59_0000u64 | self.0 as u64
    }
}

/// Which update rule a parameter receives under the hybrid optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimClass {
    Muon,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamShape {
    Matrix(usize, usize),
    Vector(usize),
}

impl ParamShape {
    pub fn len(&self) -> usize {
        match *self {
            ParamShape::Matrix(r, c) => r * c,
            ParamShape::Vector(n) => n,
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One registry entry: `(layer_id, name, shape, optimizer class, scored?)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    pub name: String,
    pub shape: ParamShape,
    pub class: OptimClass,
    /// Whether the layer belongs to the ghost-scored set R.
    pub scored: bool,
}

/// A parameter tensor.
#[derive(Debug, Clone)]
pub enum Param {
    Matrix(Array2<f64>),
    Vector(Array1<f64>),
}

impl Param {
    pub fn as_matrix(&self) -> &Array2<f64> {
        match self {
            Param::Matrix(m) => m,
            Param::Vector(_) => panic!("expected matrix parameter"),
        }
    }
    pub fn as_vector(&self) -> &Array1<f64> {
        match self {
            Param::Vector(v) => v,
            Param::Matrix(_) => panic!("expected vector parameter"),
        }
    }
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Param::Matrix(m) => m.iter().copied().collect(),
            Param::Vector(v) => v.to_vec(),
        }
    }
    pub fn flat_mut_apply(&mut self, f: impl FnMut(&mut f64)) {
        match self {
            Param::Matrix(m) => m.iter_mut().for_each(f),
            Param::Vector(v) => v.iter_mut().for_each(f),
        }
    }
    pub fn len(&self) -> usize {
        match self {
            Param::Matrix(m) => m.len(),
            Param::Vector(v) => v.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len_train: usize,
    pub seq_len_score: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("seq_len_train", self.seq_len_train),
            ("seq_len_score", self.seq_len_score),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_len_score > self.seq_len_train {
            return Err(Error::Config(format!(
                "seq_len_score {} exceeds seq_len_train {}",
                self.seq_len_score, self.seq_len_train
            )));
        }
        Ok(())
    }
}

/// A batch of token sequences with stable sample ids.
#[derive(Debug, Clone)]
pub struct Batch {
    /// n_samples x T token id matrix.
    pub tokens: Array2<u32>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn new(tokens: Array2<u32>, ids: Vec<u64>) -> Result<Self> {
        if tokens.nrows() != ids.len() {
            return Err(Error::Shape(format!(
                "batch has {} rows but {} ids",
                tokens.nrows(),
                ids.len()
            )));
        }
        Ok(Self { tokens, ids })
    }

    pub fn from_rows(rows: &[Vec<u32>], ids: Vec<u64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("batch with no sequences".into()));
        }
        let t = rows[0].len();
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Shape("sequence lengths differ within batch".into()));
        }
        let mut tokens = Array2::zeros((rows.len(), t));
        for (i, r) in rows.iter().enumerate() {
            for (j, &tok) in r.iter().enumerate() {
                tokens[[i, j]] = tok;
            }
        }
        Batch::new(tokens, ids)
    }

    pub fn n_samples(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.ncols()
    }

    /// Copy of this batch truncated to its first `t` positions.
    pub fn truncated(&self, t: usize) -> Batch {
        let t = t.min(self.seq_len());
        Batch {
            tokens: self.tokens.slice(ndarray::s![.., ..t]).to_owned(),
            ids: self.ids.clone(),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.seq_len() < 2 {
            return Err(Error::Shape(
                "sequences need at least 2 tokens for next-token loss".into(),
            ));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} out of range for vocab {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// Parameters plus the layer registry of the model.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub registry: Vec<LayerInfo>,
    pub params: Vec<Param>,
}

/// Registry indices for one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIdx {
    pub norm1: usize,
    pub qkv: usize,
    pub attn_out: usize,
    pub norm2: usize,
    pub mlp_in: usize,
    pub mlp_out: usize,
}

pub const EMBED_IDX: usize = 0;

impl ModelState {
    pub fn block(&self, b: usize) -> BlockIdx {
        let base = 1 + 6 * b;
        BlockIdx {
            norm1: base,
            qkv: base + 1,
            attn_out: base + 2,
            norm2: base + 3,
            mlp_in: base + 4,
            mlp_out: base + 5,
        }
    }

    pub fn final_norm_idx(&self) -> usize {
        1 + 6 * self.config.n_layers
    }

    pub fn embedding(&self) -> &Array2<f64> {
        self.params[EMBED_IDX].as_matrix()
    }

    /// Layers in the ghost-scored set R, in registry order.
    pub fn scored_layers(&self, include_embedding: bool) -> Vec<&LayerInfo> {
        self.registry
            .iter()
            .filter(|l| l.scored || (include_embedding && l.id.index() == EMBED_IDX))
            .collect()
    }

    pub fn layer(&self, id: LayerId) -> &LayerInfo {
        &self.registry[id.index()]
    }

    pub fn total_param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Collect all parameters as one flat vector (registry order, row-major).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_param_count());
        for p in &self.params {
            out.extend(p.flat());
        }
        out
    }
}

fn registry_for(config: &ModelConfig) -> Vec<LayerInfo> {
    let d = config.d_model;
    let v = config.vocab_size;
    let mut reg = Vec::new();
    let push = |name: String, shape: ParamShape, class: OptimClass, scored: bool, reg: &mut Vec<LayerInfo>| {
        let id = LayerId(reg.len() as u32);
        reg.push(LayerInfo { id, name, shape, class, scored });
    };
    push("embed".into(), ParamShape::Matrix(v, d), OptimClass::AdamW, false, &mut reg);
    for b in 0..config.n_layers {
        push(format!("blocks.{b}.norm1"), ParamShape::Vector(d), OptimClass::AdamW, false, &mut reg);
        push(format!("blocks.{b}.qkv"), ParamShape::Matrix(d, 3 * d), OptimClass::Muon, true, &mut reg);
        push(format!("blocks.{b}.attn_out"), ParamShape::Matrix(d, d), OptimClass::Muon, true, &mut reg);
        push(format!("blocks.{b}.norm2"), ParamShape::Vector(d), OptimClass::AdamW, false, &mut reg);
        push(format!("blocks.{b}.mlp_in"), ParamShape::Matrix(d, 4 * d), OptimClass::Muon, true, &mut reg);
        push(format!("blocks.{b}.mlp_out"), ParamShape::Matrix(4 * d, d), OptimClass::Muon, true, &mut reg);
    }
    push("norm_f".into(), ParamShape::Vector(d), OptimClass::AdamW, false, &mut reg);
    reg
}

/// Build a model with seeded, deterministic initialization.
///
/// Embeddings and inner projections use N(0, 0.02); residual-out projections
/// (attn_out, mlp_out) use N(0, 0.02 / sqrt(2 * n_layers)); norm gains start
/// at 1. The same seed yields bit-identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let registry = registry_for(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = Normal::new(0.0, 0.02).expect("std is positive");
    let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
    let resid = Normal::new(0.0, resid_std).expect("std is positive");

    let mut params = Vec::with_capacity(registry.len());
    for info in &registry {
        let residual_out = info.name.ends_with("attn_out") || info.name.ends_with("mlp_out");
        let p = match info.shape {
            ParamShape::Matrix(r, c) => {
                let dist = if residual_out { resid } else { base };
                let mut m = Array2::zeros((r, c));
                for x in m.iter_mut() {
                    *x = dist.sample(&mut rng);
                }
                Param::Matrix(m)
            }
            ParamShape::Vector(n) => Param::Vector(Array1::ones(n)),
        };
        params.push(p);
    }
    Ok(ModelState { config: config.clone(), registry, params })
}
