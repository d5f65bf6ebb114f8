//! The scoring and selection loop plus baseline policies.
//!
//! Feature generation follows the algorithm's structure: per-layer proxy
//! sketches (unpreconditioned), per-candidate preconditioned sketch
//! features, then K rounds of utility evaluation against the running
//! history with either Boltzmann sampling or a deterministic argmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerGhosts;
use crate::optim::Preconditioner;
use crate::rng::CounterRng;
use crate::sketch::{sketch_inner, SketchOperator, SketchVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Opus,
    Greedy,
    Random,
    HighPpl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Candidate buffer size N.
    pub buffer_size: usize,
    /// Selection ratio rho in (0, 1]; K = floor(rho * N).
    pub selection_ratio: f64,
    /// Boltzmann temperature tau.
    pub temperature: f64,
    /// Proxy mini-batch size, refreshed every step.
    pub proxy_batch: usize,
    pub policy: Policy,
    /// Ablation knob: subtract the running-history redundancy term.
    pub redundancy_penalty: bool,
    /// Multiplier on marginal utilities before sampling. Gradient-inner-
    /// product utilities shrink with parameter count; this maps them into
    /// the temperature's dynamic range at small scale. Both the alignment
    /// and redundancy terms scale linearly, so their balance is unchanged.
    pub utility_gain: f64,
    pub rng_seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            buffer_size: 32,
            selection_ratio: 0.5,
            temperature: 0.9,
            proxy_batch: 8,
            policy: Policy::Opus,
            redundancy_penalty: true,
            utility_gain: 1.0,
            rng_seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.selection_ratio > 0.0 && self.selection_ratio <= 1.0) {
            return Err(Error::Config("selection_ratio must lie in (0, 1]".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.buffer_size < 1 || self.target_k() < 1 {
            return Err(Error::Config("buffer must admit at least one selection".into()));
        }
        if self.proxy_batch < 1 {
            return Err(Error::Config("proxy batch must hold at least one sample".into()));
        }
        if !(self.utility_gain > 0.0) {
            return Err(Error::Config("utility gain must be positive".into()));
        }
        Ok(())
    }

    pub fn target_k(&self) -> usize {
        (self.selection_ratio * self.buffer_size as f64).floor() as usize
    }
}

/// Per-step trace of one selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub step: u64,
    pub policy: Policy,
    pub rng_stream: u64,
    pub candidates: Vec<u64>,
    /// Round -> (candidate id, utility) over the remaining candidates.
    pub utilities: BTreeMap<usize, Vec<(u64, f64)>>,
    /// Selected ids in sampled order.
    pub selected: Vec<u64>,
}

impl SelectionRecord {
    pub fn validate(&self) -> Result<()> {
        let cand: std::collections::HashSet<u64> = self.candidates.iter().copied().collect();
        let mut seen = std::collections::HashSet::new();
        for id in &self.selected {
            if !cand.contains(id) {
                return Err(Error::Config(format!("selected id {id} not in candidates")));
            }
            if !seen.insert(*id) {
                return Err(Error::Config(format!("duplicate selected id {id}")));
            }
        }
        Ok(())
    }
}

/// Per-layer sketches of one candidate's preconditioned gradient.
pub type Features = Vec<SketchVector>;

/// Unpreconditioned per-layer proxy sketches: psi_r = Pi_r(mean A^T B).
pub fn proxy_sketches(proxy_ghosts: &[LayerGhosts], ops: &[SketchOperator]) -> Result<Features> {
    if proxy_ghosts.is_empty() {
        return Err(Error::Empty("proxy ghost batch".into()));
    }
    align(proxy_ghosts, ops)?;
    proxy_ghosts
        .iter()
        .zip(ops)
        .map(|(lg, op)| op.sketch_ghost_mean(&lg.samples))
        .collect()
}

/// Preconditioned sketch features per candidate:
/// phi_r(z) = Pi_r(P_r(A^T B)) with the layer's step factor folded in.
///
/// `OPUS_THREADS` caps an optional fan-out across candidates; results are
/// bitwise independent of the thread count (outputs land in index order).
pub fn candidate_features(
    ghosts: &[LayerGhosts],
    preconds: &[Preconditioner],
    ops: &[SketchOperator],
) -> Result<Vec<Features>> {
    let threads = std::env::var("OPUS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    candidate_features_with_threads(ghosts, preconds, ops, threads)
}

pub fn candidate_features_with_threads(
    ghosts: &[LayerGhosts],
    preconds: &[Preconditioner],
    ops: &[SketchOperator],
    threads: usize,
) -> Result<Vec<Features>> {
    align(ghosts, ops)?;
    if preconds.len() != ghosts.len() {
        return Err(Error::LayerMismatch(format!(
            "{} preconditioners for {} scored layers",
            preconds.len(),
            ghosts.len()
        )));
    }
    let n = ghosts.first().map(|lg| lg.samples.len()).unwrap_or(0);
    if ghosts.iter().any(|lg| lg.samples.len() != n) {
        return Err(Error::Shape("layers disagree on candidate count".into()));
    }
    let one = |z: usize| -> Result<Features> {
        ghosts
            .iter()
            .zip(preconds)
            .zip(ops)
            .map(|((lg, p), op)| op.sketch_ghost(&lg.samples[z], p))
            .collect()
    };
    let threads = threads.min(n.max(1));
    if threads <= 1 {
        return (0..n).map(one).collect();
    }
    std::thread::scope(|s| {
        let chunk = n.div_ceil(threads);
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let lo = t * chunk;
                let hi = ((t + 1) * chunk).min(n);
                s.spawn(move || (lo..hi).map(one).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut features = Vec::with_capacity(n);
        for h in handles {
            features.extend(h.join().expect("feature worker panicked")?);
        }
        Ok(features)
    })
}

fn align(ghosts: &[LayerGhosts], ops: &[SketchOperator]) -> Result<()> {
    if ghosts.len() != ops.len() || ghosts.iter().zip(ops).any(|(g, o)| g.layer != o.layer) {
        return Err(Error::LayerMismatch(
            "ghost layers and sketch operators are not aligned".into(),
        ));
    }
    Ok(())
}

/// Alignment minus redundancy:
/// U = sum_r <phi_r, psi_r> - sum_r <phi_r, Phi_r>.
/// The step factors inside phi carry the eta / eta^2 asymmetry: psi is
/// unpreconditioned and unscaled, while the history is a sum of phi.
pub fn utility(phi: &Features, psi: &Features, history: &Features) -> Result<f64> {
    if phi.len() != psi.len() || phi.len() != history.len() {
        return Err(Error::LayerMismatch("feature layer sets differ".into()));
    }
    let mut u = 0.0;
    for ((p, s), h) in phi.iter().zip(psi).zip(history) {
        u += sketch_inner(p, s)? - sketch_inner(p, h)?;
    }
    Ok(u)
}

/// Boltzmann distribution over utilities with max-subtraction. Entries that
/// are not finite get probability zero; if every entry is non-finite the
/// step must abort. If all exponentials underflow, falls back to argmax.
pub fn boltzmann_distribution(utils: &[f64], tau: f64) -> Result<Vec<f64>> {
    let mx = utils.iter().copied().filter(|u| u.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::NonFinite("all selection utilities are non-finite".into()));
    }
    let exps: Vec<f64> = utils
        .iter()
        .map(|&u| if u.is_finite() { ((u - mx) / tau).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        let argmax = argmax_lowest_index(utils);
        let mut p = vec![0.0; utils.len()];
        p[argmax] = 1.0;
        return Ok(p);
    }
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Entropy (nats) of a Boltzmann distribution over the given utilities.
pub fn boltzmann_entropy(utils: &[f64], tau: f64) -> f64 {
    match boltzmann_distribution(utils, tau) {
        Ok(p) => -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>(),
        Err(_) => f64::NAN,
    }
}

fn argmax_lowest_index(utils: &[f64]) -> usize {
    let mut best = 0;
    for (i, &u) in utils.iter().enumerate() {
        if u.is_finite() && (!utils[best].is_finite() || u > utils[best]) {
            best = i;
        }
    }
    best
}

struct MarginalLoop<'a> {
    features: &'a [Features],
    alignment: Vec<f64>,
    history: Features,
    redundancy: bool,
    gain: f64,
}

impl<'a> MarginalLoop<'a> {
    fn new(
        n_ids: usize,
        features: &'a [Features],
        psi: &Features,
        redundancy: bool,
        gain: f64,
    ) -> Result<Self> {
        if n_ids != features.len() {
            return Err(Error::Shape("ids and features disagree".into()));
        }
        let alignment: Result<Vec<f64>> = features
            .iter()
            .map(|phi| {
                phi.iter()
                    .zip(psi)
                    .map(|(p, s)| sketch_inner(p, s))
                    .sum::<Result<f64>>()
            })
            .collect();
        let history = psi
            .iter()
            .map(|s| SketchVector::zeros(s.layer, s.values.len()))
            .collect();
        Ok(Self { features, alignment: alignment?, history, redundancy, gain })
    }

    /// Current marginal utility of candidate `z` against the history.
    fn utility_of(&self, z: usize) -> Result<f64> {
        let mut u = self.alignment[z];
        if self.redundancy {
            for (p, h) in self.features[z].iter().zip(&self.history) {
                u -= sketch_inner(p, h)?;
            }
        }
        Ok(u * self.gain)
    }

    fn push_history(&mut self, z: usize) {
        for (h, p) in self.history.iter_mut().zip(&self.features[z]) {
            h.add_assign(p);
        }
    }
}

/// Soft sampling loop: K rounds, each sampling one remaining candidate with
/// probability proportional to exp(U/tau), then adding its features to the
/// redundancy history. Round r draws from the stream keyed
/// `(rng_seed, step, micro, r)`.
pub fn select_boltzmann(
    ids: &[u64],
    features: &[Features],
    psi: &Features,
    cfg: &SelectionConfig,
    step: u64,
    micro: u64,
) -> Result<SelectionRecord> {
    cfg.validate()?;
    let k = cfg.target_k().min(ids.len());
    let mut lp = MarginalLoop::new(ids.len(), features, psi, cfg.redundancy_penalty, cfg.utility_gain)?;
    let base_key = [cfg.rng_seed, crate::rng::domain::SELECT, step, micro];
    let mut remaining: Vec<usize> = (0..ids.len()).collect();
    let mut utilities = BTreeMap::new();
    let mut selected = Vec::with_capacity(k);

    for round in 0..k {
        let utils: Vec<f64> = remaining
            .iter()
            .map(|&z| lp.utility_of(z))
            .collect::<Result<Vec<_>>>()?;
        utilities.insert(round, remaining.iter().zip(&utils).map(|(&z, &u)| (ids[z], u)).collect());
        let probs = boltzmann_distribution(&utils, cfg.temperature)?;

        let mut rng = CounterRng::from_key(&[base_key[0], base_key[1], base_key[2], base_key[3], round as u64]);
        let draw = rng.next_f64();
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                pick = i;
                break;
            }
        }
        let z = remaining.remove(pick);
        selected.push(ids[z]);
        lp.push_history(z);
    }

    let record = SelectionRecord {
        step,
        policy: Policy::Opus,
        rng_stream: CounterRng::from_key(&base_key).stream_id(),
        candidates: ids.to_vec(),
        utilities,
        selected,
    };
    record.validate()?;
    Ok(record)
}

/// Deterministic variant of the marginal loop: argmax per round, ties
/// broken by lowest candidate index.
pub fn select_greedy(
    ids: &[u64],
    features: &[Features],
    psi: &Features,
    cfg: &SelectionConfig,
    step: u64,
) -> Result<SelectionRecord> {
    cfg.validate()?;
    let k = cfg.target_k().min(ids.len());
    let mut lp = MarginalLoop::new(ids.len(), features, psi, cfg.redundancy_penalty, cfg.utility_gain)?;
    let mut remaining: Vec<usize> = (0..ids.len()).collect();
    let mut utilities = BTreeMap::new();
    let mut selected = Vec::with_capacity(k);

    for round in 0..k {
        let utils: Vec<f64> = remaining
            .iter()
            .map(|&z| lp.utility_of(z))
            .collect::<Result<Vec<_>>>()?;
        utilities.insert(round, remaining.iter().zip(&utils).map(|(&z, &u)| (ids[z], u)).collect());
        if utils.iter().all(|u| !u.is_finite()) {
            return Err(Error::NonFinite("all selection utilities are non-finite".into()));
        }
        let pick = argmax_lowest_index(&utils);
        let z = remaining.remove(pick);
        selected.push(ids[z]);
        lp.push_history(z);
    }

    let record = SelectionRecord {
        step,
        policy: Policy::Greedy,
        rng_stream: 0,
        candidates: ids.to_vec(),
        utilities,
        selected,
    };
    record.validate()?;
    Ok(record)
}

/// Uniform selection of k distinct candidates; K >= N returns the buffer
/// unchanged. No scoring is performed.
pub fn select_random(ids: &[u64], k: usize, seed: u64, step: u64, micro: u64) -> Result<SelectionRecord> {
    let key = [seed, crate::rng::domain::SELECT, step, micro];
    let mut rng = CounterRng::from_key(&key);
    let selected = if k >= ids.len() {
        ids.to_vec()
    } else {
        let mut idx: Vec<usize> = (0..ids.len()).collect();
        for i in 0..k {
            let j = i + rng.next_below(idx.len() - i);
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| ids[i]).collect()
    };
    let record = SelectionRecord {
        step,
        policy: Policy::Random,
        rng_stream: rng.stream_id(),
        candidates: ids.to_vec(),
        utilities: BTreeMap::new(),
        selected,
    };
    record.validate()?;
    Ok(record)
}

/// Select the k highest-loss sequences; ties broken by lowest index.
pub fn select_high_ppl(ids: &[u64], losses: &[f64], k: usize, step: u64) -> Result<SelectionRecord> {
    if ids.len() != losses.len() {
        return Err(Error::Shape("ids and losses disagree".into()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        losses[b].partial_cmp(&losses[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let k = k.min(ids.len());
    let mut utilities = BTreeMap::new();
    utilities.insert(0usize, ids.iter().zip(losses).map(|(&i, &l)| (i, l)).collect::<Vec<_>>());
    let record = SelectionRecord {
        step,
        policy: Policy::HighPpl,
        rng_stream: 0,
        candidates: ids.to_vec(),
        utilities,
        selected: order[..k].iter().map(|&i| ids[i]).collect(),
    };
    record.validate()?;
    Ok(record)
}

/// Round to `digits` significant decimal digits (for trace serialization).
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}
