//! Manual forward/backward for the pre-norm transformer.
//!
//! Activations are batched as (n_samples * T, dim) matrices so linear layers
//! run as single matmuls; attention loops per sample and head. The backward
//! pass produces, for every scored 2-D layer, the batched `(A, B)` ghost
//! matrices whose per-sample row blocks reconstruct per-sample gradients.

use ndarray::{s, Array1, Array2};

use super::ghost::{GhostFactors, LayerGhosts};
use super::{Batch, ModelState, Param, ParamShape, EMBED_IDX};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise RMS normalization with gain; returns (output, per-row 1/rms).
fn rmsnorm_fwd(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols();
    let gain = gain.as_slice().expect("gain is contiguous");
    let mut y = Array2::zeros(x.raw_dim());
    let mut rinv = Array1::zeros(x.nrows());
    for (i, row) in x.outer_iter().enumerate() {
        let row = row.to_slice().expect("activations are contiguous");
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        rinv[i] = r;
        let mut out = y.row_mut(i);
        let out = out.as_slice_mut().expect("output is contiguous");
        for ((o, &xv), &g) in out.iter_mut().zip(row).zip(gain) {
            *o = xv * r * g;
        }
    }
    (y, rinv)
}

/// Backward of `rmsnorm_fwd`; returns (dx, dgain summed over rows).
fn rmsnorm_bwd(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    rinv: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols();
    let gain = gain.as_slice().expect("gain is contiguous");
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgain = vec![0.0; d];
    for i in 0..x.nrows() {
        let r = rinv[i];
        let xr = x.row(i);
        let xr = xr.to_slice().expect("activations are contiguous");
        let dyr = dy.row(i);
        let dyr = dyr.to_slice().expect("gradients are contiguous");
        let mut s = 0.0;
        for j in 0..d {
            s += dyr[j] * gain[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * r;
        }
        let k = r * r * r * s / d as f64;
        let mut dxr = dx.row_mut(i);
        let dxr = dxr.as_slice_mut().expect("output is contiguous");
        for j in 0..d {
            dxr[j] = r * gain[j] * dyr[j] - k * xr[j];
        }
    }
    (dx, Array1::from_vec(dgain))
}

struct BlockCache {
    x_in: Array2<f64>,
    h1: Array2<f64>,
    r1: Array1<f64>,
    qkv: Array2<f64>,
    /// Attention probabilities per (sample, head), each T x T.
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    x_mid: Array2<f64>,
    h2: Array2<f64>,
    r2: Array1<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    x_last: Array2<f64>,
    hf: Array2<f64>,
    rf: Array1<f64>,
    logits: Array2<f64>,
    /// Row-wise softmax of the logits (reused by the backward pass).
    probs: Array2<f64>,
    lse: Array1<f64>,
}

/// Result of a forward pass: per-sample losses plus the cached activations
/// the backward pass needs. Borrowing the model makes a stale cache
/// unrepresentable: parameters cannot change while a pass is alive.
pub struct ForwardPass<'m> {
    model: &'m ModelState,
    batch: Batch,
    losses: Vec<f64>,
    cache: Cache,
}

/// Ghost factors per scored layer plus the batch-mean gradient for every
/// registered parameter.
pub struct BackwardOutput {
    /// Scored layers in registry order.
    pub ghosts: Vec<LayerGhosts>,
    /// Mean gradient per registry entry (same shapes as the parameters).
    pub grads: Vec<Param>,
}

impl ModelState {
    /// Per-sample negative log-likelihood over next-token targets,
    /// normalized by the number of targets. Activations are cached on the
    /// returned pass for `backward_ghost`.
    pub fn forward_loss(&self, batch: &Batch) -> Result<ForwardPass<'_>> {
        batch.validate(self.config.vocab_size)?;
        let bsz = batch.n_samples();
        let t = batch.seq_len();
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dh = d / nh;
        let n = bsz * t;
        let emb = self.embedding();

        let mut x = Array2::zeros((n, d));
        for s in 0..bsz {
            for p in 0..t {
                let tok = batch.tokens[[s, p]] as usize;
                x.row_mut(s * t + p).assign(&emb.row(tok));
            }
        }
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        let mut blocks = Vec::with_capacity(self.config.n_layers);
        for b in 0..self.config.n_layers {
            let idx = self.block(b);
            let g1 = self.params[idx.norm1].as_vector();
            let w_qkv = self.params[idx.qkv].as_matrix();
            let w_ao = self.params[idx.attn_out].as_matrix();
            let g2 = self.params[idx.norm2].as_vector();
            let w_mi = self.params[idx.mlp_in].as_matrix();
            let w_mo = self.params[idx.mlp_out].as_matrix();

            let x_in = x;
            let (h1, r1) = rmsnorm_fwd(&x_in, g1);
            let qkv = h1.dot(w_qkv);

            let mut att = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(bsz * nh);
            for s in 0..bsz {
                let rows = s * t..(s + 1) * t;
                for h in 0..nh {
                    let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                    let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                    let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                    let scores = q.dot(&k.t());
                    // causal softmax: row i attends to positions 0..=i only
                    let mut p = Array2::zeros((t, t));
                    for i in 0..t {
                        let srow = scores.row(i);
                        let srow = srow.to_slice().expect("scores are contiguous");
                        let mut prow = p.row_mut(i);
                        let prow = prow.as_slice_mut().expect("probs are contiguous");
                        let mut mx = f64::NEG_INFINITY;
                        for &s in &srow[..=i] {
                            mx = mx.max(s * inv_sqrt_dh);
                        }
                        let mut z = 0.0;
                        for (pj, &s) in prow[..=i].iter_mut().zip(srow) {
                            *pj = (s * inv_sqrt_dh - mx).exp();
                            z += *pj;
                        }
                        let inv = 1.0 / z;
                        for pj in prow[..=i].iter_mut() {
                            *pj *= inv;
                        }
                    }
                    let o = p.dot(&v);
                    att.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&o);
                    probs.push(p);
                }
            }

            let ao = att.dot(w_ao);
            let x_mid = &x_in + &ao;
            let (h2, r2) = rmsnorm_fwd(&x_mid, g2);
            let u = h2.dot(w_mi);
            let g = u.mapv(gelu);
            let mo = g.dot(w_mo);
            x = &x_mid + &mo;

            blocks.push(BlockCache { x_in, h1, r1, qkv, probs, att, x_mid, h2, r2, u, g });
        }

        let x_last = x;
        let gf = self.params[self.final_norm_idx()].as_vector();
        let (hf, rf) = rmsnorm_fwd(&x_last, gf);
        let logits = hf.dot(&emb.t());

        let mut lse = Array1::zeros(n);
        let mut probs = Array2::zeros(logits.raw_dim());
        for (i, row) in logits.outer_iter().enumerate() {
            let row = row.to_slice().expect("logits are contiguous");
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut prow = probs.row_mut(i);
            let prow = prow.as_slice_mut().expect("probs are contiguous");
            let mut z = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            let inv = 1.0 / z;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            lse[i] = mx + z.ln();
        }

        let n_targets = (t - 1) as f64;
        let mut losses = vec![0.0; bsz];
        for s in 0..bsz {
            let mut acc = 0.0;
            for p in 0..t - 1 {
                let row = s * t + p;
                let target = batch.tokens[[s, p + 1]] as usize;
                acc += lse[row] - logits[[row, target]];
            }
            losses[s] = acc / n_targets;
        }

        Ok(ForwardPass {
            model: self,
            batch: batch.clone(),
            losses,
            cache: Cache { blocks, x_last, hf, rf, logits, probs, lse },
        })
    }
}

impl<'m> ForwardPass<'m> {
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    /// Logit row for (sample, position); row-major (V,) view.
    pub fn logits_at(&self, sample: usize, pos: usize) -> ndarray::ArrayView1<'_, f64> {
        self.cache.logits.row(sample * self.batch.seq_len() + pos)
    }

    /// Backward pass over the cached activations.
    ///
    /// Returns ghost factors for every scored layer (embedding included when
    /// `include_embedding_ghosts` via the sparse one-hot path) and the
    /// batch-mean gradient for every registered parameter. The cache cannot
    /// be stale: this pass borrows the model it was computed against.
    pub fn backward_ghost(&self, include_embedding_ghosts: bool) -> Result<BackwardOutput> {
        self.backward_impl(Some(include_embedding_ghosts))
    }

    /// Batch-mean gradients only (update passes have no use for per-sample
    /// factors).
    pub fn backward_grads(&self) -> Result<Vec<Param>> {
        Ok(self.backward_impl(None)?.grads)
    }

    fn backward_impl(&self, ghost_mode: Option<bool>) -> Result<BackwardOutput> {
        let model = self.model;
        let bsz = self.batch.n_samples();
        let t = self.batch.seq_len();
        let d = model.config.d_model;
        let v = model.config.vocab_size;
        let nh = model.config.n_heads;
        let dh = d / nh;
        let n = bsz * t;
        let emb = model.embedding();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        let c = &self.cache;

        // d(loss_s)/d(logits); per-sample normalization folded in so that
        // ghost products reconstruct per-sample gradients.
        let n_targets = (t - 1) as f64;
        let inv_targets = 1.0 / n_targets;
        let mut dlogits = Array2::zeros((n, v));
        for s in 0..bsz {
            for p in 0..t - 1 {
                let row = s * t + p;
                let target = self.batch.tokens[[s, p + 1]] as usize;
                let prow = c.probs.row(row);
                let prow = prow.to_slice().expect("probs are contiguous");
                let mut out = dlogits.row_mut(row);
                let out = out.as_slice_mut().expect("dlogits are contiguous");
                for (o, &pv) in out.iter_mut().zip(prow) {
                    *o = pv * inv_targets;
                }
                out[target] -= inv_targets;
            }
        }

        let dhf = dlogits.dot(emb);
        let de_head = dlogits.t().dot(&c.hf);
        let gf = model.params[model.final_norm_idx()].as_vector();
        let (mut dx, dgf) = rmsnorm_bwd(&c.x_last, gf, &c.rf, &dhf);

        // Per-block batched ghost matrices, collected in forward order.
        let mut block_b: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> =
            Vec::with_capacity(model.config.n_layers);
        let mut dgains: Vec<(Array1<f64>, Array1<f64>)> = Vec::with_capacity(model.config.n_layers);
        block_b.resize_with(model.config.n_layers, || {
            (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
        });
        dgains.resize_with(model.config.n_layers, || (Array1::zeros(0), Array1::zeros(0)));

        for b in (0..model.config.n_layers).rev() {
            let idx = model.block(b);
            let bc = &c.blocks[b];
            let g1 = model.params[idx.norm1].as_vector();
            let w_qkv = model.params[idx.qkv].as_matrix();
            let w_ao = model.params[idx.attn_out].as_matrix();
            let g2 = model.params[idx.norm2].as_vector();
            let w_mi = model.params[idx.mlp_in].as_matrix();
            let w_mo = model.params[idx.mlp_out].as_matrix();

            // x2 = x_mid + gelu(rms(x_mid)) @ w_mi @ w_mo
            let dmo = dx; // gradient at mlp_out output
            let dg = dmo.dot(&w_mo.t());
            let mut du = dg;
            for (duv, &uv) in du.iter_mut().zip(bc.u.iter()) {
                *duv *= gelu_prime(uv);
            }
            let dh2 = du.dot(&w_mi.t());
            let (dx_mid_norm, dg2) = rmsnorm_bwd(&bc.x_mid, g2, &bc.r2, &dh2);
            let dx_mid = &dmo + &dx_mid_norm;

            // x_mid = x_in + att @ w_ao
            let dao = dx_mid.clone();
            let datt = dao.dot(&w_ao.t());

            let mut dqkv = Array2::zeros((n, 3 * d));
            for s in 0..bsz {
                let rows = s * t..(s + 1) * t;
                for h in 0..nh {
                    let p = &bc.probs[s * nh + h];
                    let k = bc.qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                    let q = bc.qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                    let vv = bc.qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                    let do_h = datt.slice(s![rows.clone(), h * dh..(h + 1) * dh]);

                    let dp = do_h.dot(&vv.t());
                    let dv = p.t().dot(&do_h);
                    let mut ds = Array2::zeros((t, t));
                    for i in 0..t {
                        let dprow = dp.row(i);
                        let dprow = dprow.to_slice().expect("dp is contiguous");
                        let prow = p.row(i);
                        let prow = prow.to_slice().expect("p is contiguous");
                        let mut dsrow = ds.row_mut(i);
                        let dsrow = dsrow.as_slice_mut().expect("ds is contiguous");
                        let mut rd = 0.0;
                        for (&d, &pv) in dprow[..=i].iter().zip(prow) {
                            rd += d * pv;
                        }
                        for ((o, &d), &pv) in dsrow[..=i].iter_mut().zip(dprow).zip(prow) {
                            *o = pv * (d - rd) * inv_sqrt_dh;
                        }
                    }
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&dq);
                    dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
                    dqkv
                        .slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh])
                        .assign(&dv);
                }
            }

            let dh1 = dqkv.dot(&w_qkv.t());
            let (dx_in_norm, dg1) = rmsnorm_bwd(&bc.x_in, g1, &bc.r1, &dh1);
            dx = &dx_mid + &dx_in_norm;

            block_b[b] = (dqkv, dao, du, dmo);
            dgains[b] = (dg1, dg2);
        }

        // Embedding gradient: input-lookup scatter plus tied-head term.
        let mut de = de_head;
        for s in 0..bsz {
            for p in 0..t {
                let tok = self.batch.tokens[[s, p]] as usize;
                let row = s * t + p;
                let mut target = de.row_mut(tok);
                for j in 0..d {
                    target[j] += dx[[row, j]];
                }
            }
        }

        let scale = 1.0 / bsz as f64;
        let mut grads: Vec<Param> = model
            .registry
            .iter()
            .map(|info| match info.shape {
                ParamShape::Matrix(r, cc) => Param::Matrix(Array2::zeros((r, cc))),
                ParamShape::Vector(nn) => Param::Vector(Array1::zeros(nn)),
            })
            .collect();
        grads[EMBED_IDX] = Param::Matrix(de.clone() * scale);
        let fni = model.final_norm_idx();
        grads[fni] = Param::Vector(dgf * scale);

        let include_embedding_ghosts = ghost_mode == Some(true);
        let mut ghosts = Vec::new();
        if include_embedding_ghosts {
            // Sparse one-hot A path concatenated with the tied-head pair:
            // A = [onehot(tokens); dlogits], B = [dx0_grad; hf].
            let mut samples = Vec::with_capacity(bsz);
            for s in 0..bsz {
                let mut a = Array2::zeros((2 * t, v));
                let mut bm = Array2::zeros((2 * t, d));
                for p in 0..t {
                    let row = s * t + p;
                    a[[p, self.batch.tokens[[s, p]] as usize]] = 1.0;
                    bm.row_mut(p).assign(&dx.row(row));
                    a.row_mut(t + p).assign(&dlogits.row(row));
                    bm.row_mut(t + p).assign(&c.hf.row(row));
                }
                samples.push(GhostFactors::new(model.registry[EMBED_IDX].id, a, bm)?);
            }
            ghosts.push(LayerGhosts {
                layer: model.registry[EMBED_IDX].id,
                grad_shape: (v, d),
                samples,
            });
        }

        for b in 0..model.config.n_layers {
            let idx = model.block(b);
            let bc = &c.blocks[b];
            let (dqkv, dao, du, dmo) = &block_b[b];
            let (dg1, dg2) = &dgains[b];
            grads[idx.norm1] = Param::Vector(dg1 * scale);
            grads[idx.norm2] = Param::Vector(dg2 * scale);

            let pairs: [(usize, &Array2<f64>, &Array2<f64>); 4] = [
                (idx.qkv, &bc.h1, dqkv),
                (idx.attn_out, &bc.att, dao),
                (idx.mlp_in, &bc.h2, du),
                (idx.mlp_out, &bc.g, dmo),
            ];
            for (reg_idx, a_full, b_full) in pairs {
                grads[reg_idx] = Param::Matrix(a_full.t().dot(b_full) * scale);
                if ghost_mode.is_none() {
                    continue;
                }
                let mut samples = Vec::with_capacity(bsz);
                for s in 0..bsz {
                    let rows = s![s * t..(s + 1) * t, ..];
                    samples.push(GhostFactors::new(
                        model.registry[reg_idx].id,
                        a_full.slice(rows).to_owned(),
                        b_full.slice(rows).to_owned(),
                    )?);
                }
                ghosts.push(LayerGhosts {
                    layer: model.registry[reg_idx].id,
                    grad_shape: (a_full.ncols(), b_full.ncols()),
                    samples,
                });
            }
        }

        // Registry order for the ghost list.
        ghosts.sort_by_key(|g| g.layer.0);

        if grads.iter().any(|g| match g {
            Param::Matrix(m) => m.iter().any(|x| !x.is_finite()),
            Param::Vector(vv) => vv.iter().any(|x| !x.is_finite()),
        }) {
            return Err(Error::NonFinite("gradient".into()));
        }

        Ok(BackwardOutput { ghosts, grads })
    }
}
