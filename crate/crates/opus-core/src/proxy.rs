//! Bench-Proxy construction: score corpus documents against a target set in
//! a shared embedding space and accumulate the most relevant ones into a
//! token-budgeted proxy pool.
//!
//! The embedder is a deterministic signed feature hash of character
//! n-grams; externally computed embeddings can be loaded from file instead.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Doc;
use crate::error::{Error, Result};
use crate::rng::hash_words;

pub const DEFAULT_EMBED_DIM: usize = 512;
const EMBED_SALT: u64 = 0xe3be_d001;

/// Unit-norm embedding (or exactly zero for text with no n-grams).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    /// Cosine similarity; defined as 0 against a zero vector.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.is_zero() || other.is_zero() {
            return 0.0;
        }
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    fn normalized(mut v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector(v)
    }
}

/// Feature-hashed character n-gram embedding (n in {3,4,5}) with signed
/// hashing into `dim` buckets, L2-normalized. Deterministic; empty or
/// too-short text embeds to the zero vector.
pub fn embed_text(text: &str, dim: usize) -> EmbeddingVector {
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0; dim];
    let mut buf = [0u8; 4];
    for n in 3..=5usize {
        if chars.len() < n {
            continue;
        }
        for w in chars.windows(n) {
            let mut h = hash_words(&[EMBED_SALT, n as u64]);
            for &c in w {
                let s = c.encode_utf8(&mut buf);
                for &b in s.as_bytes() {
                    h = crate::rng::mix64(h ^ b as u64);
                }
            }
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
    }
    EmbeddingVector::normalized(v)
}

/// A document annotated with its maximum similarity over the target set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub id: String,
    pub text: String,
    pub token_count: usize,
    pub relevance: f64,
}

/// Annotate every document with max-over-targets cosine similarity.
pub fn score_corpus(docs: &[Doc], targets: &[EmbeddingVector], dim: usize) -> Result<Vec<ScoredDoc>> {
    if targets.is_empty() {
        return Err(Error::Empty("target embedding set".into()));
    }
    Ok(docs
        .iter()
        .map(|d| {
            let e = embed_text(&d.text, dim);
            let relevance = targets
                .iter()
                .map(|t| e.cosine(t))
                .fold(f64::NEG_INFINITY, f64::max);
            ScoredDoc {
                id: d.id.clone(),
                text: d.text.clone(),
                token_count: d.token_count(),
                relevance,
            }
        })
        .collect())
}

/// Greedy accumulation by descending relevance (ties: id ascending) while
/// the running token total is below the budget; the first document crossing
/// the budget is included, then accumulation stops.
pub fn build_proxy_pool(scored: &[ScoredDoc], token_budget: usize) -> Result<Vec<ScoredDoc>> {
    if scored.is_empty() {
        return Err(Error::Empty("scored corpus".into()));
    }
    if token_budget < 1 {
        return Err(Error::Config("token budget must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .relevance
            .partial_cmp(&scored[a].relevance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(scored[a].id.cmp(&scored[b].id))
    });
    let mut pool = Vec::new();
    let mut total = 0usize;
    for &i in &order {
        if total >= token_budget {
            break;
        }
        pool.push(scored[i].clone());
        total += scored[i].token_count;
    }
    Ok(pool)
}

/// Write a proxy pool: one JSON header line (config fingerprint) followed by
/// one ScoredDoc per line.
pub fn write_proxy_pool(
    path: &Path,
    pool: &[ScoredDoc],
    fingerprint: u64,
    token_budget: usize,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "{}",
        serde_json::json!({
            "proxy_pool_header": 1,
            "fingerprint": format!("{fingerprint:016x}"),
            "token_budget": token_budget,
            "docs": pool.len(),
        })
    )?;
    for d in pool {
        writeln!(f, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

/// Read a proxy pool written by `write_proxy_pool`.
pub fn read_proxy_pool(path: &Path) -> Result<Vec<ScoredDoc>> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Empty("proxy pool file".into()))?;
    let header: serde_json::Value = serde_json::from_str(header)?;
    if header.get("proxy_pool_header").is_none() {
        return Err(Error::Config("missing proxy pool header line".into()));
    }
    let mut pool = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        pool.push(serde_json::from_str(line)?);
    }
    Ok(pool)
}

/// Load externally precomputed embeddings: little-endian f32 rows of width
/// `dim`, each prefixed by a u32 id length and the id bytes. Vectors are
/// L2-normalized on load.
pub fn load_embedding_file(path: &Path, dim: usize) -> Result<Vec<(String, EmbeddingVector)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(Error::Config("truncated embedding record header".into()));
        }
        let id_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + id_len + 4 * dim > bytes.len() {
            return Err(Error::Config("truncated embedding record".into()));
        }
        let id = String::from_utf8(bytes[pos..pos + id_len].to_vec())
            .map_err(|e| Error::Config(format!("embedding id not utf-8: {e}")))?;
        pos += id_len;
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64);
            pos += 4;
        }
        out.push((id, EmbeddingVector::normalized(v)));
    }
    Ok(out)
}

/// Companion writer for the embedding file format.
pub fn write_embedding_file(path: &Path, rows: &[(String, Vec<f32>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, v) in rows {
        f.write_all(&(id.len() as u32).to_le_bytes())?;
        f.write_all(id.as_bytes())?;
        for x in v {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}
