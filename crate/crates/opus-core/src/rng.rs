//! Counter-based random number streams.
//!
//! Every stochastic decision in a run is drawn from a stream keyed by
//! `(seed, domain, step, round)` rather than from one mutable generator, so
//! the value of any draw is a pure function of its key and counter. Parallel
//! evaluation order can never perturb sampling, and resuming a run at step
//! `s` reproduces the exact draws of an uninterrupted run.

/// SplitMix64 finalizer: a 64-bit avalanche permutation.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Keyed pseudo-random function over a slice of 64-bit words.
///
/// Chains the avalanche mix across words; identical inputs give identical
/// outputs on every platform and process.
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = 0x6a09_e667_f3bc_c909u64; // sqrt(2) fraction, arbitrary non-zero start
    for &w in words {
        h = mix64(h ^ w);
    }
    h
}

/// PRF over a byte string (folds little-endian 8-byte words).
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = 0xbb67_ae85_84ca_a73bu64;
    for chunk in bytes.chunks(8) {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(w));
    }
    mix64(h ^ bytes.len() as u64)
}

/// A stateless stream of draws identified by a single 64-bit key.
///
/// The n-th draw is `mix64(key + n)`-style PRF output; the struct only
/// tracks the counter.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Stream keyed by the given words (typically `[seed, domain, step, round]`).
    pub fn from_key(words: &[u64]) -> Self {
        Self { key: hash_words(words), counter: 0 }
    }

    /// Stable identifier of this stream (for trace records).
    pub fn stream_id(&self) -> u64 {
        self.key
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key ^ mix64(self.counter.wrapping_add(0x1000_0000_0000_0001)));
        self.counter += 1;
        v
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is < n / 2^64, far below anything our frequency tests resolve.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (deterministic, platform-stable).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Domain separators for the run's independent stream families.
pub mod domain {
    pub const SPLIT: u64 = 1;
    pub const SELECT: u64 = 2;
    pub const PROXY: u64 = 3;
}
