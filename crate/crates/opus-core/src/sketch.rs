//! CountSketch operators and ghost-aware projected features.
//!
//! Hash and sign are pure functions of `(seed, layer, flat_index)` via a
//! 64-bit avalanche mix, so sketches are identical across processes.
//! Operators cache the per-index table; the values always equal the pure
//! function.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GhostFactors, LayerId};
use crate::optim::{PrecondKind, Preconditioner};
use crate::rng::hash_words;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchConfig {
    pub m: usize,
    pub seed: u64,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self { m: 8192, seed: 42 }
    }
}

/// Bucket and sign for one flat coordinate: low bits mod m, top bit sign.
pub fn hash_sign(seed: u64, layer_salt: u64, flat_index: u64, m: usize) -> (usize, f64) {
    let x = hash_words(&[seed, layer_salt, flat_index]);
    let h = (x % m as u64) as usize;
    let s = if x >> 63 == 1 { -1.0 } else { 1.0 };
    (h, s)
}

/// An m-dimensional sketch of one layer's gradient space.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchVector {
    pub layer: LayerId,
    pub values: Vec<f64>,
}

impl SketchVector {
    pub fn zeros(layer: LayerId, m: usize) -> Self {
        Self { layer, values: vec![0.0; m] }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { layer: self.layer, values: self.values.iter().map(|v| v * factor).collect() }
    }

    pub fn add_assign(&mut self, other: &SketchVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Inner product of two sketches of the same layer.
pub fn sketch_inner(u: &SketchVector, v: &SketchVector) -> Result<f64> {
    if u.layer != v.layer {
        return Err(Error::LayerMismatch(format!(
            "inner product across layers {} and {}",
            u.layer.0, v.layer.0
        )));
    }
    if u.values.len() != v.values.len() {
        return Err(Error::Shape("sketch dimensions differ".into()));
    }
    // four independent accumulators keep the loop vectorizable; the lane
    // split is fixed, so the result is deterministic
    let (a, b) = (&u.values, &v.values);
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    Ok((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail)
}

/// Seeded CountSketch for one layer shape.
#[derive(Debug, Clone)]
pub struct SketchOperator {
    pub m: usize,
    pub seed: u64,
    pub layer: LayerId,
    pub shape: (usize, usize),
    /// Cached (bucket | sign<<63) per flat index; equals `hash_sign`.
    table: Vec<u64>,
}

impl SketchOperator {
    pub fn new(config: SketchConfig, layer: LayerId, shape: (usize, usize)) -> Self {
        let n = shape.0 * shape.1;
        let table = (0..n as u64)
            .map(|k| {
                let (h, s) = hash_sign(config.seed, layer.salt(), k, config.m);
                h as u64 | ((s < 0.0) as u64) << 63
            })
            .collect();
        Self { m: config.m, seed: config.seed, layer, shape, table }
    }

    #[inline]
    fn slot(&self, k: usize) -> (usize, f64) {
        let e = self.table[k];
        ((e & !(1u64 << 63)) as usize, if e >> 63 == 1 { -1.0 } else { 1.0 })
    }

    fn check_shape(&self, got: (usize, usize)) -> Result<()> {
        if got != self.shape {
            return Err(Error::Shape(format!(
                "layer {} expects {:?}, got {:?}",
                self.layer.0, self.shape, got
            )));
        }
        Ok(())
    }

    /// Reference path: sketch a dense d_in x d_out gradient,
    /// out[h(k)] += s(k) * g_flat[k] in flat row-major index order.
    pub fn sketch_dense(&self, g: &Array2<f64>) -> Result<SketchVector> {
        self.check_shape(g.dim())?;
        let mut out = SketchVector::zeros(self.layer, self.m);
        for (k, &x) in g.iter().enumerate() {
            let (h, s) = self.slot(k);
            out.values[h] += s * x;
        }
        Ok(out)
    }

    /// Production path: sketch the preconditioned per-sample gradient
    /// directly from ghost factors, holding at most one gradient row at a
    /// time. Equals `sketch_dense(apply_preconditioner(p, A^T B))`.
    ///
    /// Identity and Diagonal interleave their weights while streaming rows
    /// of `A^T B`; LeftMatrix first maps `B <- B S^T` and then streams.
    pub fn sketch_ghost(&self, g: &GhostFactors, p: &Preconditioner) -> Result<SketchVector> {
        if g.layer != self.layer {
            return Err(Error::LayerMismatch(format!(
                "ghost for layer {} sketched by operator for {}",
                g.layer.0, self.layer.0
            )));
        }
        self.check_shape(g.grad_shape())?;
        let (d_in, d_out) = self.shape;
        let scale = p.step_factor;
        let b_mapped;
        let (b, diag): (&Array2<f64>, Option<&[f64]>) = match &p.kind {
            PrecondKind::Identity => (&g.b, None),
            PrecondKind::Diagonal(w) => {
                if w.len() != d_in * d_out {
                    return Err(Error::Shape("diagonal weight length mismatch".into()));
                }
                (&g.b, Some(w))
            }
            PrecondKind::LeftMatrix(s) => {
                if s.nrows() != d_out {
                    return Err(Error::Shape("left matrix does not match d_out".into()));
                }
                b_mapped = g.b.dot(&s.t());
                (&b_mapped, None)
            }
        };

        let mut out = SketchVector::zeros(self.layer, self.m);
        let mut row = vec![0.0; d_out];
        for i in 0..d_in {
            // row i of A^T B
            let a_col = g.a.column(i);
            row.iter_mut().for_each(|x| *x = 0.0);
            for (t, &av) in a_col.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = b.row(t);
                for (r, &bv) in row.iter_mut().zip(brow.iter()) {
                    *r += av * bv;
                }
            }
            let base = i * d_out;
            match diag {
                Some(w) => {
                    for (j, &x) in row.iter().enumerate() {
                        let (h, s) = self.slot(base + j);
                        out.values[h] += s * scale * w[base + j] * x;
                    }
                }
                None => {
                    for (j, &x) in row.iter().enumerate() {
                        let (h, s) = self.slot(base + j);
                        out.values[h] += s * scale * x;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mean of per-sample unpreconditioned sketches (the proxy direction).
    /// By linearity this equals the sketch of the mean dense gradient.
    pub fn sketch_ghost_mean(&self, ghosts: &[GhostFactors]) -> Result<SketchVector> {
        if ghosts.is_empty() {
            return Err(Error::Empty("proxy ghost batch".into()));
        }
        let identity = Preconditioner { kind: PrecondKind::Identity, step_factor: 1.0 };
        let mut acc = SketchVector::zeros(self.layer, self.m);
        for g in ghosts {
            acc.add_assign(&self.sketch_ghost(g, &identity)?);
        }
        Ok(acc.scaled(1.0 / ghosts.len() as f64))
    }
}

/// Factorized fast path for identity preconditioning: per-axis CountSketch
/// plus circular convolution (via FFT). A different projection family from
/// the flat operator — inner products agree with it in expectation only.
#[derive(Clone)]
pub struct FactoredSketchOperator {
    pub m: usize,
    pub layer: LayerId,
    pub shape: (usize, usize),
    table_in: Vec<u64>,
    table_out: Vec<u64>,
}

const AXIS_IN: u64 = 0x5e11_0001;
const AXIS_OUT: u64 = 0x5e11_0002;

impl FactoredSketchOperator {
    pub fn new(config: SketchConfig, layer: LayerId, shape: (usize, usize)) -> Self {
        let build = |axis: u64, n: usize| -> Vec<u64> {
            (0..n as u64)
                .map(|k| {
                    let (h, s) = hash_sign(config.seed ^ axis, layer.salt(), k, config.m);
                    h as u64 | ((s < 0.0) as u64) << 63
                })
                .collect()
        };
        Self {
            m: config.m,
            layer,
            shape,
            table_in: build(AXIS_IN, shape.0),
            table_out: build(AXIS_OUT, shape.1),
        }
    }

    /// Sketch of `scale * A^T B` in O(T (d_in + d_out + m log m)).
    pub fn sketch_ghost(&self, g: &GhostFactors, scale: f64) -> Result<SketchVector> {
        if g.grad_shape() != self.shape {
            return Err(Error::Shape("factored sketch shape mismatch".into()));
        }
        let m = self.m;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        let ifft = planner.plan_fft_inverse(m);

        let slot = |table: &[u64], k: usize| -> (usize, f64) {
            let e = table[k];
            ((e & !(1u64 << 63)) as usize, if e >> 63 == 1 { -1.0 } else { 1.0 })
        };

        let mut acc = vec![Complex::new(0.0, 0.0); m];
        let mut ca = vec![Complex::new(0.0, 0.0); m];
        let mut cb = vec![Complex::new(0.0, 0.0); m];
        for t in 0..g.a.nrows() {
            ca.iter_mut().for_each(|x| *x = Complex::new(0.0, 0.0));
            cb.iter_mut().for_each(|x| *x = Complex::new(0.0, 0.0));
            for (k, &v) in g.a.row(t).iter().enumerate() {
                let (h, s) = slot(&self.table_in, k);
                ca[h].re += s * v;
            }
            for (k, &v) in g.b.row(t).iter().enumerate() {
                let (h, s) = slot(&self.table_out, k);
                cb[h].re += s * v;
            }
            fft.process(&mut ca);
            fft.process(&mut cb);
            for ((a, b), o) in ca.iter().zip(&cb).zip(acc.iter_mut()) {
                *o += a * b;
            }
        }
        ifft.process(&mut acc);
        let norm = scale / m as f64; // rustfft leaves the inverse unnormalized
        Ok(SketchVector {
            layer: self.layer,
            values: acc.iter().map(|c| c.re * norm).collect(),
        })
    }
}
