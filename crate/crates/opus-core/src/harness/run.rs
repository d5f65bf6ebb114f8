//! The per-step training loop wiring selection to the model and optimizer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::checkpoint::{read_checkpoint, write_checkpoint, RunState};
use crate::data::{eval_sequences, read_corpus, split_corpus, Doc, TokenStream};
use crate::error::{Error, Result};
use crate::nn::{init_model, Batch, LayerInfo, ModelState, Param, ParamShape};
use crate::optim::{clip_global_norm, lr_multiplier, Optimizer, OptimizerConfig, OptimizerKind};
use crate::proxy::read_proxy_pool;
use crate::rng::{domain, CounterRng};
use crate::select::{
    boltzmann_entropy, candidate_features, proxy_sketches, round_sig, select_boltzmann,
    select_greedy, select_high_ppl, select_random, Policy, SelectionConfig, SelectionRecord,
};
use crate::sketch::{SketchConfig, SketchOperator};

use super::{ProxySource, RunConfig};

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub trace_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub steps: u64,
    pub update_tokens: u64,
    pub scored_tokens: u64,
    pub final_val_loss: f64,
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    run_inner(cfg, None)
}

/// Continue a checkpointed run under the same structural config (budget may
/// be extended). Appends to the existing metrics and trace files; the
/// result is bit-identical to an uninterrupted run.
pub fn resume_experiment(cfg: &RunConfig, checkpoint: &Path) -> Result<RunOutput> {
    run_inner(cfg, Some(checkpoint))
}

/// Mean per-sequence loss over an evaluation set.
pub fn eval_val_loss(model: &ModelState, seqs: &[Vec<u32>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    // batch runs of equal length for throughput; per-sample losses do not
    // depend on batch composition
    let mut i = 0;
    while i < seqs.len() {
        let len = seqs[i].len();
        let mut j = i;
        while j < seqs.len() && seqs[j].len() == len && j - i < 32 {
            j += 1;
        }
        let rows: Vec<Vec<u32>> = seqs[i..j].to_vec();
        let ids: Vec<u64> = (i..j).map(|x| x as u64).collect();
        let batch = Batch::from_rows(&rows, ids)?;
        let pass = model.forward_loss(&batch)?;
        total += pass.losses().iter().sum::<f64>();
        count += pass.losses().len();
        i = j;
    }
    Ok(total / count as f64)
}

/// Per-group perplexity: exp(mean NLL) over each tagged document group.
pub fn eval_domain_ppl(
    model: &ModelState,
    docs: &[Doc],
    seq_len: usize,
    by_group: bool,
) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<Doc>> = BTreeMap::new();
    for d in docs {
        let key = if by_group {
            d.group.clone().unwrap_or_else(|| "ungrouped".into())
        } else {
            "all".into()
        };
        groups.entry(key).or_default().push(d.clone());
    }
    let mut out = BTreeMap::new();
    for (name, docs) in groups {
        let seqs = eval_sequences(&docs, seq_len);
        if seqs.is_empty() {
            return Err(Error::Empty(format!("group {name} yields no sequences")));
        }
        out.insert(name, eval_val_loss(model, &seqs)?.exp());
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn batch_from_ids(buffer: &Batch, ids: &[u64]) -> Result<Batch> {
    let index: HashMap<u64, usize> =
        buffer.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let rows: Vec<Vec<u32>> = ids
        .iter()
        .map(|id| {
            index
                .get(id)
                .map(|&i| buffer.tokens.row(i).to_vec())
                .ok_or_else(|| Error::Config(format!("selected id {id} not in buffer")))
        })
        .collect::<Result<_>>()?;
    Batch::from_rows(&rows, ids.to_vec())
}

fn trace_line(record: &SelectionRecord) -> Result<String> {
    let mut rounded = record.clone();
    for utils in rounded.utilities.values_mut() {
        for (_, u) in utils.iter_mut() {
            *u = round_sig(*u, 9);
        }
    }
    Ok(serde_json::to_string(&rounded)?)
}

fn accumulate(acc: &mut Option<Vec<Param>>, grads: Vec<Param>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (dst, src) in a.iter_mut().zip(grads) {
                match (dst, src) {
                    (Param::Matrix(d), Param::Matrix(s)) => *d += &s,
                    (Param::Vector(d), Param::Vector(s)) => *d += &s,
                    _ => unreachable!("registry shapes are fixed"),
                }
            }
        }
    }
}

/// Draw a proxy mini-batch (without replacement when the pool allows it).
fn proxy_batch(
    proxy_seqs: &[Vec<u32>],
    k: usize,
    seed: u64,
    step: u64,
    micro: u64,
) -> Result<Batch> {
    let mut rng = CounterRng::from_key(&[seed, domain::PROXY, step, micro]);
    let n = proxy_seqs.len();
    let picks: Vec<usize> = if n >= k {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.next_below(n - i);
            idx.swap(i, j);
        }
        idx[..k].to_vec()
    } else {
        (0..k).map(|_| rng.next_below(n)).collect()
    };
    let rows: Vec<Vec<u32>> = picks.iter().map(|&i| proxy_seqs[i].clone()).collect();
    Batch::from_rows(&rows, picks.iter().map(|&i| i as u64).collect())
}

struct Scoring<'a> {
    model: &'a ModelState,
    optimizer: &'a Optimizer,
    scored_infos: &'a [LayerInfo],
    ops: &'a [SketchOperator],
    proxy_seqs: &'a [Vec<u32>],
    sel_cfg: &'a SelectionConfig,
    include_embedding: bool,
    t_score: usize,
}

impl Scoring<'_> {
    /// Policy dispatch for one micro-batch. Returns the record, the
    /// first-round selection-distribution entropy, and scored tokens.
    fn select(
        &self,
        buffer: &Batch,
        step: u64,
        micro: u64,
        lr_mult: f64,
    ) -> Result<(SelectionRecord, f64, u64)> {
        let k = self.sel_cfg.target_k();
        let ids = buffer.ids.clone();
        match self.sel_cfg.policy {
            Policy::Random => {
                let record = select_random(&ids, k, self.sel_cfg.rng_seed, step, micro)?;
                Ok((record, (buffer.n_samples() as f64).ln(), 0))
            }
            Policy::HighPpl => {
                let pass = self.model.forward_loss(&buffer.truncated(self.t_score))?;
                let record = select_high_ppl(&ids, pass.losses(), k, step)?;
                let scored = (buffer.n_samples() * self.t_score) as u64;
                Ok((record, 0.0, scored))
            }
            Policy::Opus | Policy::Greedy => {
                let score_batch = buffer.truncated(self.t_score);
                let cand_back = self
                    .model
                    .forward_loss(&score_batch)?
                    .backward_ghost(self.include_embedding)?;
                let proxy = proxy_batch(
                    self.proxy_seqs,
                    self.sel_cfg.proxy_batch,
                    self.sel_cfg.rng_seed,
                    step,
                    micro,
                )?;
                let proxy_back =
                    self.model.forward_loss(&proxy)?.backward_ghost(self.include_embedding)?;
                let scored =
                    ((buffer.n_samples() + proxy.n_samples()) * self.t_score) as u64;

                let psi = proxy_sketches(&proxy_back.ghosts, self.ops)?;
                let preconds = self
                    .scored_infos
                    .iter()
                    .map(|info| {
                        let fallback: Option<&Array2<f64>> =
                            match &proxy_back.grads[info.id.index()] {
                                Param::Matrix(m) => Some(m),
                                Param::Vector(_) => None,
                            };
                        self.optimizer.extract_preconditioner(info, lr_mult, fallback)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let features = candidate_features(&cand_back.ghosts, &preconds, self.ops)?;

                let record = match self.sel_cfg.policy {
                    Policy::Opus => {
                        select_boltzmann(&ids, &features, &psi, self.sel_cfg, step, micro)?
                    }
                    _ => select_greedy(&ids, &features, &psi, self.sel_cfg, step)?,
                };
                let entropy = match self.sel_cfg.policy {
                    Policy::Opus => {
                        let utils: Vec<f64> =
                            record.utilities[&0].iter().map(|&(_, u)| u).collect();
                        boltzmann_entropy(&utils, self.sel_cfg.temperature)
                    }
                    _ => 0.0,
                };
                Ok((record, entropy, scored))
            }
        }
    }
}

fn run_inner(cfg: &RunConfig, resume: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let fp = cfg.fingerprint();
    let docs = read_corpus(&cfg.corpus)?;
    let manifest = split_corpus(&docs, cfg.val_fraction, cfg.proxy_fraction, cfg.seed)?;
    let by_id: HashMap<&str, &Doc> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let pick = |ids: &[String]| -> Vec<Doc> {
        ids.iter().map(|i| by_id[i.as_str()].clone()).collect()
    };
    let train_docs = pick(&manifest.train);
    let val_docs = pick(&manifest.val);

    let t_train = cfg.model.seq_len_train;
    let t_score = cfg.model.seq_len_score;
    let mut stream = TokenStream::new(&train_docs, t_train);
    let mut val_seqs = eval_sequences(&val_docs, t_train);
    val_seqs.truncate(cfg.eval_max_sequences);
    if val_seqs.is_empty() {
        return Err(Error::Empty("validation split yields no sequences".into()));
    }

    let proxy_docs: Vec<Doc> = match &cfg.proxy_source {
        ProxySource::RandomHoldout => pick(&manifest.proxy_eligible),
        ProxySource::Pool(path) => {
            let pool = read_proxy_pool(path)?;
            let val_set: HashSet<&str> = manifest.val.iter().map(|s| s.as_str()).collect();
            let eligible: HashSet<&str> =
                manifest.proxy_eligible.iter().map(|s| s.as_str()).collect();
            let train_set: HashSet<&str> = manifest.train.iter().map(|s| s.as_str()).collect();
            for d in &pool {
                if val_set.contains(d.id.as_str()) {
                    return Err(Error::Config(format!(
                        "proxy pool doc {} is in the validation split",
                        d.id
                    )));
                }
                let ok = if cfg.allow_proxy_overlap {
                    eligible.contains(d.id.as_str()) || train_set.contains(d.id.as_str())
                } else {
                    eligible.contains(d.id.as_str())
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "proxy pool doc {} is not drawn from the proxy-eligible split",
                        d.id
                    )));
                }
            }
            pool.iter()
                .map(|d| Doc { id: d.id.clone(), text: d.text.clone(), group: None })
                .collect()
        }
    };
    let proxy_seqs: Vec<Vec<u32>> = TokenStream::new(&proxy_docs, t_score)
        .collect_all(None)
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let needs_proxy = matches!(cfg.selection.policy, Policy::Opus | Policy::Greedy);
    if needs_proxy && proxy_seqs.is_empty() {
        return Err(Error::Empty(
            "proxy source yields no sequences; raise proxy_fraction or provide a pool".into(),
        ));
    }

    let mut model = init_model(&cfg.model)?;
    let total_steps = cfg.total_steps();
    let mut optimizer = Optimizer::new(&model, cfg.optimizer.clone(), total_steps)?;
    let mut step = 0u64;
    let mut update_tokens = 0u64;
    let mut scored_tokens = 0u64;

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let trace_path = cfg.out_dir.join("trace.jsonl");
    let ckpt_path = cfg.out_dir.join("ckpt.bin");

    if let Some(ck) = resume {
        let loaded = read_checkpoint(ck)?;
        let run = loaded
            .run
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no run state".into()))?;
        if run.fingerprint != fp {
            return Err(Error::Checkpoint(
                "config fingerprint does not match the checkpoint".into(),
            ));
        }
        if loaded.model.config != cfg.model {
            return Err(Error::Checkpoint("model config mismatch on resume".into()));
        }
        let snap = loaded
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        model = loaded.model;
        optimizer.load_snapshot(&snap, run.step)?;
        step = run.step;
        update_tokens = run.update_tokens;
        scored_tokens = run.scored_tokens;
        stream.seek(run.stream_cursor as usize);
        if !metrics_path.exists() || !trace_path.exists() {
            return Err(Error::Checkpoint(
                "resume expects the run's metrics and trace files in out_dir".into(),
            ));
        }
    } else {
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::write(
            cfg.out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(
            &metrics_path,
            format!(
                "# opus-metrics fingerprint={fp:016x}\nstep,update_tokens,train_loss,val_loss,selection_entropy,overhead_fraction\n"
            ),
        )?;
        std::fs::write(
            &trace_path,
            format!("{}\n", serde_json::json!({"trace_header": 1, "fingerprint": format!("{fp:016x}")})),
        )?;
    }

    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?,
    );
    let mut trace = std::io::BufWriter::new(
        std::fs::OpenOptions::new().append(true).open(&trace_path)?,
    );

    let scored_infos: Vec<LayerInfo> = model
        .scored_layers(cfg.include_embedding_ghosts)
        .into_iter()
        .cloned()
        .collect();
    let ops: Vec<SketchOperator> = scored_infos
        .iter()
        .map(|info| {
            let shape = match info.shape {
                ParamShape::Matrix(r, c) => (r, c),
                ParamShape::Vector(n) => (n, 1),
            };
            SketchOperator::new(cfg.sketch, info.id, shape)
        })
        .collect();
    let sel_cfg = SelectionConfig { rng_seed: cfg.seed, ..cfg.selection.clone() };

    let mut final_val = f64::NAN;
    let mut last_row_step = None;

    'outer: loop {
        if update_tokens >= cfg.token_budget {
            break;
        }
        let lr_mult =
            lr_multiplier(step.min(total_steps), total_steps, cfg.warmup_fraction, cfg.lr_decay);
        let scoring = Scoring {
            model: &model,
            optimizer: &optimizer,
            scored_infos: &scored_infos,
            ops: &ops,
            proxy_seqs: &proxy_seqs,
            sel_cfg: &sel_cfg,
            include_embedding: cfg.include_embedding_ghosts,
            t_score,
        };

        let mut grad_acc: Option<Vec<Param>> = None;
        let mut micros_done = 0u64;
        let mut train_loss_sum = 0.0;
        let mut entropy_sum = 0.0;
        let mut trace_lines = Vec::new();

        for micro in 0..cfg.grad_accum {
            let Some(buffer) = stream.next_candidate_buffer(sel_cfg.buffer_size) else {
                if micros_done == 0 {
                    break 'outer;
                }
                break;
            };
            let (record, entropy, scored) = scoring.select(&buffer, step, micro, lr_mult)?;
            scored_tokens += scored;
            trace_lines.push(trace_line(&record)?);

            let sel_batch = batch_from_ids(&buffer, &record.selected)?;
            let pass = model.forward_loss(&sel_batch)?;
            let train_loss = mean(pass.losses());
            if !train_loss.is_finite() {
                return Err(Error::Aborted {
                    step,
                    reason: "non-finite training loss; last-good checkpoint retained".into(),
                });
            }
            accumulate(&mut grad_acc, pass.backward_grads()?);
            train_loss_sum += train_loss;
            entropy_sum += entropy;
            update_tokens += (sel_batch.n_samples() * t_train) as u64;
            micros_done += 1;
        }
        if micros_done == 0 {
            break;
        }
        // the selection happened with the pre-step state; commit it now
        for line in &trace_lines {
            writeln!(trace, "{line}")?;
        }
        let mut grads = grad_acc.expect("at least one micro batch");
        if micros_done > 1 {
            let inv = 1.0 / micros_done as f64;
            for g in grads.iter_mut() {
                g.flat_mut_apply(|x| *x *= inv);
            }
        }
        clip_global_norm(&mut grads, cfg.optimizer.grad_clip);
        optimizer.step(&mut model.params, &grads, lr_mult)?;
        step += 1;

        let budget_reached = update_tokens >= cfg.token_budget;
        if step % cfg.eval_interval == 0 || budget_reached {
            let val = eval_val_loss(&model, &val_seqs)?;
            final_val = val;
            let train = train_loss_sum / micros_done as f64;
            let ent = entropy_sum / micros_done as f64;
            let overhead = scored_tokens as f64 / update_tokens as f64;
            writeln!(metrics, "{step},{update_tokens},{train},{val},{ent},{overhead}")?;
            last_row_step = Some(step);
            metrics.flush()?;
            trace.flush()?;
            write_checkpoint(
                &ckpt_path,
                &model,
                Some(&optimizer),
                Some(&RunState {
                    fingerprint: fp,
                    step,
                    update_tokens,
                    scored_tokens,
                    stream_cursor: stream.cursor() as u64,
                }),
            )?;
        }
        if budget_reached {
            break;
        }
    }

    if last_row_step != Some(step) {
        // stream exhausted between eval points: record the final state
        let val = eval_val_loss(&model, &val_seqs)?;
        final_val = val;
        let overhead = if update_tokens > 0 {
            scored_tokens as f64 / update_tokens as f64
        } else {
            0.0
        };
        writeln!(metrics, "{step},{update_tokens},NaN,{val},NaN,{overhead}")?;
        write_checkpoint(
            &ckpt_path,
            &model,
            Some(&optimizer),
            Some(&RunState {
                fingerprint: fp,
                step,
                update_tokens,
                scored_tokens,
                stream_cursor: stream.cursor() as u64,
            }),
        )?;
    }
    metrics.flush()?;
    trace.flush()?;

    Ok(RunOutput {
        out_dir: cfg.out_dir.clone(),
        metrics_path,
        trace_path,
        checkpoint_path: ckpt_path,
        steps: step,
        update_tokens,
        scored_tokens,
        final_val_loss: final_val,
    })
}

/// One-shot scoring of a buffer against a proxy pool, for the `score` CLI:
/// first-round utilities (empty history) per packed sequence.
///
/// Preconditioners come from the checkpoint's optimizer section when
/// present (with default hyperparameters for its kind); a model-only
/// checkpoint scores in raw-gradient space (identity, unit step).
pub fn score_buffer(
    checkpoint: &Path,
    buffer_docs: &[Doc],
    proxy_docs: &[Doc],
    sketch: SketchConfig,
) -> Result<Vec<(u64, f64)>> {
    let loaded = read_checkpoint(checkpoint)?;
    let model = loaded.model;
    let t_train = model.config.seq_len_train;
    let t_score = model.config.seq_len_score;

    let optimizer = match &loaded.optimizer {
        Some(snap) => {
            let choice = match snap.kind {
                0 => OptimizerKind::Sgd,
                1 => OptimizerKind::Adamw,
                _ => OptimizerKind::MuonHybrid,
            };
            let mut opt = Optimizer::new(
                &model,
                OptimizerConfig { choice, ..Default::default() },
                loaded.run.map(|r| r.step.max(1)).unwrap_or(1),
            )?;
            let step = loaded.run.map(|r| r.step).unwrap_or(snap.adam_t);
            opt.load_snapshot(snap, step)?;
            opt
        }
        None => Optimizer::new(
            &model,
            OptimizerConfig { choice: OptimizerKind::Sgd, lr_sgd: 1.0, ..Default::default() },
            1,
        )?,
    };

    let mut stream = TokenStream::new(buffer_docs, t_train);
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    while let Some((id, seq)) = stream.next_sequence() {
        ids.push(id);
        rows.push(seq);
    }
    if rows.is_empty() {
        return Err(Error::Empty("buffer yields no sequences".into()));
    }
    let buffer = Batch::from_rows(&rows, ids)?;

    let proxy_seqs: Vec<Vec<u32>> = TokenStream::new(proxy_docs, t_score)
        .collect_all(None)
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    if proxy_seqs.is_empty() {
        return Err(Error::Empty("proxy source yields no sequences".into()));
    }

    let scored_infos: Vec<LayerInfo> = model.scored_layers(false).into_iter().cloned().collect();
    let ops: Vec<SketchOperator> = scored_infos
        .iter()
        .map(|info| {
            let shape = match info.shape {
                ParamShape::Matrix(r, c) => (r, c),
                ParamShape::Vector(n) => (n, 1),
            };
            SketchOperator::new(sketch, info.id, shape)
        })
        .collect();

    let cand_back = model.forward_loss(&buffer.truncated(t_score))?.backward_ghost(false)?;
    let k_proxy = proxy_seqs.len().min(8);
    let proxy = proxy_batch(&proxy_seqs, k_proxy, sketch.seed, 0, 0)?;
    let proxy_back = model.forward_loss(&proxy)?.backward_ghost(false)?;
    let psi = proxy_sketches(&proxy_back.ghosts, &ops)?;
    let preconds = scored_infos
        .iter()
        .map(|info| {
            let fallback = match &proxy_back.grads[info.id.index()] {
                Param::Matrix(m) => Some(m),
                Param::Vector(_) => None,
            };
            optimizer.extract_preconditioner(info, 1.0, fallback)
        })
        .collect::<Result<Vec<_>>>()?;
    let features = candidate_features(&cand_back.ghosts, &preconds, &ops)?;

    let zero_hist: Vec<_> = psi
        .iter()
        .map(|s| crate::sketch::SketchVector::zeros(s.layer, s.values.len()))
        .collect();
    buffer
        .ids
        .iter()
        .zip(&features)
        .map(|(&id, phi)| Ok((id, crate::select::utility(phi, &psi, &zero_hist)?)))
        .collect()
}
