//! Byte-level tokenization, sequence packing, split management, and the
//! streaming candidate buffer.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{domain, CounterRng};

/// Byte vocabulary (0..=255) plus one document separator.
pub const VOCAB_SIZE: usize = 257;
pub const SEPARATOR: u32 = 256;

/// UTF-8 bytes as token ids 0..=255.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of `tokenize` for byte tokens; separators are dropped.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// One corpus document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Doc {
    pub id: String,
    pub text: String,
    /// Optional evaluation group tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl Doc {
    pub fn token_count(&self) -> usize {
        self.text.len()
    }
}

/// Read a JSON-lines corpus: one `{"id": ..., "text": ...}` object per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Doc>> {
    let file = std::fs::File::open(path)?;
    read_corpus_from(file)
}

pub fn read_corpus_from(reader: impl Read) -> Result<Vec<Doc>> {
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Doc = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("corpus line {}: {e}", i + 1)))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Doc]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        writeln!(f, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

/// Deterministic train/val/proxy-eligible document split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub proxy_eligible: Vec<String>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn assert_disjoint(&self) -> Result<()> {
        let val: std::collections::HashSet<&str> = self.val.iter().map(|s| s.as_str()).collect();
        if self.train.iter().any(|id| val.contains(id.as_str())) {
            return Err(Error::Config("train and val splits overlap".into()));
        }
        if self.proxy_eligible.iter().any(|id| val.contains(id.as_str())) {
            return Err(Error::Config("proxy-eligible and val splits overlap".into()));
        }
        Ok(())
    }
}

/// Seeded shuffle then prefix split: first `val_fraction` of documents go to
/// the validation split, the next `proxy_fraction` to the proxy-eligible
/// split, the rest to the training stream. Validation documents never
/// appear in training updates or proxy pools.
pub fn split_corpus(
    docs: &[Doc],
    val_fraction: f64,
    proxy_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if !(0.0..=1.0).contains(&val_fraction) || !(0.0..=1.0).contains(&proxy_fraction) {
        return Err(Error::Config("split fractions must lie in [0, 1]".into()));
    }
    if val_fraction + proxy_fraction > 1.0 {
        return Err(Error::Config("val + proxy fractions exceed 1".into()));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut rng = CounterRng::from_key(&[seed, domain::SPLIT]);
    rng.shuffle(&mut order);
    let n_val = (val_fraction * docs.len() as f64).floor() as usize;
    let n_proxy = (proxy_fraction * docs.len() as f64).floor() as usize;
    let take = |r: std::ops::Range<usize>| -> Vec<String> {
        order[r].iter().map(|&i| docs[i].id.clone()).collect()
    };
    let manifest = SplitManifest {
        val: take(0..n_val),
        proxy_eligible: take(n_val..n_val + n_proxy),
        train: take(n_val + n_proxy..docs.len()),
        seed,
    };
    manifest.assert_disjoint()?;
    Ok(manifest)
}

/// Deterministic iterator of fixed-length sequences packed from a document
/// list, with a separator token between documents. The final ragged chunk
/// is dropped.
#[derive(Debug, Clone)]
pub struct TokenStream {
    tokens: Vec<u32>,
    seq_len: usize,
    cursor: usize,
}

impl TokenStream {
    pub fn new(docs: &[Doc], seq_len: usize) -> Self {
        let mut tokens = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if i > 0 {
                tokens.push(SEPARATOR);
            }
            tokens.extend(tokenize(&d.text));
        }
        Self { tokens, seq_len, cursor: 0 }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Total number of full sequences this stream yields.
    pub fn total_sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    /// Sequences consumed so far (the resume cursor).
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Skip forward to an absolute cursor (used on resume).
    pub fn seek(&mut self, cursor: usize) {
        self.cursor = cursor.min(self.total_sequences());
    }

    pub fn next_sequence(&mut self) -> Option<(u64, Vec<u32>)> {
        if self.cursor >= self.total_sequences() {
            return None;
        }
        let start = self.cursor * self.seq_len;
        let seq = self.tokens[start..start + self.seq_len].to_vec();
        let id = self.cursor as u64;
        self.cursor += 1;
        Some((id, seq))
    }

    /// Next candidate buffer of up to `n` consecutive sequences. A final
    /// partial buffer is returned as-is (smaller than `n`); `None` once the
    /// stream is exhausted.
    pub fn next_candidate_buffer(&mut self, n: usize) -> Option<Batch> {
        let mut rows = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            match self.next_sequence() {
                Some((id, seq)) => {
                    ids.push(id);
                    rows.push(seq);
                }
                None => break,
            }
        }
        if rows.is_empty() {
            None
        } else {
            Some(Batch::from_rows(&rows, ids).expect("uniform rows by construction"))
        }
    }

    /// All remaining sequences as one list (used for fixed eval sets).
    pub fn collect_all(mut self, cap: Option<usize>) -> Vec<(u64, Vec<u32>)> {
        let mut out = Vec::new();
        while let Some(item) = self.next_sequence() {
            out.push(item);
            if cap.is_some_and(|c| out.len() >= c) {
                break;
            }
        }
        out
    }
}

/// Chunk one document group's tokens for evaluation: full-length sequences
/// plus a final ragged chunk when it still contains a next-token target.
pub fn eval_sequences(docs: &[Doc], seq_len: usize) -> Vec<Vec<u32>> {
    let mut tokens = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            tokens.push(SEPARATOR);
        }
        tokens.extend(tokenize(&d.text));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + seq_len <= tokens.len() {
        out.push(tokens[start..start + seq_len].to_vec());
        start += seq_len;
    }
    if tokens.len() - start >= 2 {
        out.push(tokens[start..].to_vec());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Doc {
        Doc { id: id.into(), text: text.into(), group: None }
    }

    #[test]
    fn tokenize_bytes() {
        assert_eq!(tokenize("A"), vec![65]);
        assert_eq!(tokenize(""), Vec::<u32>::new());
    }

    #[test]
    fn round_trip_utf8() {
        for s in ["hello", "héllo wörld", "日本語テキスト", ""] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
    }

    #[test]
    fn packing_drops_ragged_tail() {
        // 2T + 3 tokens at length T -> 2 sequences, 3 dropped
        let t = 8;
        let text: String = "x".repeat(2 * t + 3);
        let mut stream = TokenStream::new(&[doc("a", &text)], t);
        assert_eq!(stream.total_sequences(), 2);
        assert!(stream.next_sequence().is_some());
        assert!(stream.next_sequence().is_some());
        assert!(stream.next_sequence().is_none());
    }

    #[test]
    fn empty_stream_yields_nothing() {
        let mut stream = TokenStream::new(&[], 8);
        assert!(stream.next_candidate_buffer(4).is_none());
    }

    #[test]
    fn separator_inserted_between_docs() {
        let stream = TokenStream::new(&[doc("a", "ab"), doc("b", "cd")], 5);
        assert_eq!(stream.tokens, vec![97, 98, SEPARATOR, 99, 100]);
    }

    #[test]
    fn packing_is_deterministic() {
        let docs = vec![doc("a", "abcdefgh"), doc("b", "ijklmnop")];
        let mut s1 = TokenStream::new(&docs, 4);
        let mut s2 = TokenStream::new(&docs, 4);
        loop {
            match (s1.next_sequence(), s2.next_sequence()) {
                (Some(a), Some(b)) => assert_eq!(a, b),
                (None, None) => break,
                _ => panic!("streams diverged"),
            }
        }
    }

    #[test]
    fn buffer_counts() {
        let t = 4;
        let n = 3;
        // exactly 3n full sequences -> 3 full buffers
        let text: String = "y".repeat(3 * n * t);
        let mut stream = TokenStream::new(&[doc("a", &text)], t);
        for _ in 0..3 {
            let b = stream.next_candidate_buffer(n).unwrap();
            assert_eq!(b.n_samples(), n);
        }
        assert!(stream.next_candidate_buffer(n).is_none());
    }

    #[test]
    fn partial_tail_buffer() {
        let t = 4;
        let text: String = "z".repeat(5 * t);
        let mut stream = TokenStream::new(&[doc("a", &text)], t);
        assert_eq!(stream.next_candidate_buffer(3).unwrap().n_samples(), 3);
        assert_eq!(stream.next_candidate_buffer(3).unwrap().n_samples(), 2);
    }

    #[test]
    fn split_fractions_and_disjointness() {
        let docs: Vec<Doc> = (0..100).map(|i| doc(&format!("d{i}"), "text")).collect();
        let m = split_corpus(&docs, 0.1, 0.2, 7).unwrap();
        assert_eq!(m.val.len(), 10);
        assert_eq!(m.proxy_eligible.len(), 20);
        assert_eq!(m.train.len(), 70);
        m.assert_disjoint().unwrap();

        let empty = split_corpus(&docs, 0.0, 0.0, 7).unwrap();
        assert!(empty.val.is_empty());
        assert_eq!(empty.train.len(), 100);
    }

    #[test]
    fn split_deterministic_in_seed() {
        let docs: Vec<Doc> = (0..50).map(|i| doc(&format!("d{i}"), "t")).collect();
        let a = split_corpus(&docs, 0.2, 0.1, 3).unwrap();
        let b = split_corpus(&docs, 0.2, 0.1, 3).unwrap();
        assert_eq!(a.val, b.val);
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn eval_sequences_keep_short_docs() {
        let seqs = eval_sequences(&[doc("a", "abc")], 16);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].len(), 3);
    }
}
