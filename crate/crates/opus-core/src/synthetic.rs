//! Synthetic character-level corpora for experiments and tests.
//!
//! Two distinct grammars: a distractor family (patterned filler plus a
//! slice of high-entropy noise-burst documents) and a proxy-matched family
//! built from syllable motifs with strong sequential structure. Document id
//! prefixes record provenance: `B-` proxy-matched, `Af-` filler, `An-`
//! noise burst.

use crate::data::Doc;
use crate::rng::CounterRng;

const B_FAMILIES: [[&str; 4]; 4] = [
    ["na", "ne", "ni", "no"],
    ["ka", "ke", "ki", "ko"],
    ["ra", "re", "ri", "ro"],
    ["sa", "se", "si", "so"],
];

const A_SYLLABLES: [&str; 6] = ["xu", "zy", "wq", "vx", "yz", "qw"];

const NOISE_CHARS: &[u8] =
    b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789!@#$%^&*()-_=+[]{};:,.<>/?|~`'\"\\";

#[derive(Debug, Clone)]
pub struct PlantedCorpusConfig {
    pub n_docs: usize,
    /// Fraction of documents drawn from the proxy-matched grammar.
    pub matched_fraction: f64,
    /// Fraction of distractor documents that are high-entropy noise bursts.
    pub noise_fraction: f64,
    /// Approximate document length in characters.
    pub doc_len: usize,
    pub seed: u64,
}

impl Default for PlantedCorpusConfig {
    fn default() -> Self {
        Self { n_docs: 2000, matched_fraction: 0.2, noise_fraction: 0.15, doc_len: 256, seed: 0 }
    }
}

/// One proxy-matched document: syllables of one motif family, mostly
/// following a cyclic successor rule, grouped into 2-4 syllable words.
fn grammar_b_text(rng: &mut CounterRng, family: usize, len: usize) -> String {
    let syl = B_FAMILIES[family % B_FAMILIES.len()];
    let mut out = String::with_capacity(len + 8);
    let mut idx = rng.next_below(syl.len());
    while out.len() < len {
        let word_syllables = 2 + rng.next_below(3);
        for _ in 0..word_syllables {
            out.push_str(syl[idx]);
            idx = if rng.next_f64() < 0.85 { (idx + 1) % syl.len() } else { rng.next_below(syl.len()) };
        }
        out.push(' ');
    }
    out.truncate(len);
    out
}

/// Patterned filler from the distractor alphabet with the same word rhythm.
fn grammar_a_filler(rng: &mut CounterRng, len: usize) -> String {
    let mut out = String::with_capacity(len + 8);
    let mut idx = rng.next_below(A_SYLLABLES.len());
    while out.len() < len {
        let word_syllables = 2 + rng.next_below(3);
        for _ in 0..word_syllables {
            out.push_str(A_SYLLABLES[idx]);
            idx = if rng.next_f64() < 0.9 {
                (idx + 2) % A_SYLLABLES.len()
            } else {
                rng.next_below(A_SYLLABLES.len())
            };
        }
        out.push(' ');
    }
    out.truncate(len);
    out
}

/// High-entropy noise burst: i.i.d. uniform printable characters.
fn grammar_a_noise(rng: &mut CounterRng, len: usize) -> String {
    (0..len).map(|_| NOISE_CHARS[rng.next_below(NOISE_CHARS.len())] as char).collect()
}

/// Deterministic planted-distribution corpus.
pub fn planted_corpus(cfg: &PlantedCorpusConfig) -> Vec<Doc> {
    let mut docs = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let mut rng = CounterRng::from_key(&[cfg.seed, 0xC0_9905, i as u64]);
        let doc = if rng.next_f64() < cfg.matched_fraction {
            let family = rng.next_below(B_FAMILIES.len());
            Doc {
                id: format!("B-{i:06}-f{family}"),
                text: grammar_b_text(&mut rng, family, cfg.doc_len),
                group: Some("matched".into()),
            }
        } else if rng.next_f64() < cfg.noise_fraction {
            Doc {
                id: format!("An-{i:06}"),
                text: grammar_a_noise(&mut rng, cfg.doc_len),
                group: Some("distractor".into()),
            }
        } else {
            Doc {
                id: format!("Af-{i:06}"),
                text: grammar_a_filler(&mut rng, cfg.doc_len),
                group: Some("distractor".into()),
            }
        };
        docs.push(doc);
    }
    docs
}

/// Fresh proxy-matched samples (never part of a corpus), e.g. retrieval
/// targets for bench-proxy construction.
pub fn matched_targets(n: usize, doc_len: usize, seed: u64) -> Vec<Doc> {
    (0..n)
        .map(|i| {
            let mut rng = CounterRng::from_key(&[seed, 0x7A_4657, i as u64]);
            let family = i % B_FAMILIES.len();
            Doc {
                id: format!("target-{i:04}"),
                text: grammar_b_text(&mut rng, family, doc_len),
                group: Some("matched".into()),
            }
        })
        .collect()
}
