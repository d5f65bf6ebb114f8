//! The optimizer-induced preconditioner: identity (SGD), diagonal (AdamW),
//! or a dense left matrix (Muon), with a scalar step factor.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::GhostFactors;

#[derive(Debug, Clone)]
pub enum PrecondKind {
    Identity,
    /// Elementwise weights over the flattened (row-major) d_in x d_out
    /// gradient entries; strictly positive.
    Diagonal(Vec<f64>),
    /// d_out x d_out matrix acting along the output axis of the gradient.
    LeftMatrix(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub kind: PrecondKind,
    /// C_t for AdamW, kappa_t for Muon, eta_t for SGD.
    pub step_factor: f64,
}

/// Result of applying a preconditioner to ghost factors: the rank structure
/// is preserved whenever the operator allows it.
#[derive(Debug, Clone)]
pub enum Applied {
    Ghost(GhostFactors),
    Dense(Array2<f64>),
}

impl Applied {
    pub fn materialize(&self) -> Array2<f64> {
        match self {
            Applied::Ghost(g) => g.materialize(),
            Applied::Dense(d) => d.clone(),
        }
    }
}

impl Preconditioner {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            PrecondKind::Identity => Ok(()),
            PrecondKind::Diagonal(w) => {
                if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    Err(Error::NonFinite("diagonal preconditioner weights".into()))
                } else {
                    Ok(())
                }
            }
            PrecondKind::LeftMatrix(s) => {
                if s.iter().any(|x| !x.is_finite()) {
                    Err(Error::NonFinite("left-matrix preconditioner".into()))
                } else if s.nrows() != s.ncols() {
                    Err(Error::Shape("left-matrix preconditioner must be square".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Apply to a dense d_in x d_out gradient.
    pub fn apply_dense(&self, g: &Array2<f64>) -> Result<Array2<f64>> {
        match &self.kind {
            PrecondKind::Identity => Ok(g * self.step_factor),
            PrecondKind::Diagonal(w) => {
                if w.len() != g.len() {
                    return Err(Error::Shape(format!(
                        "diagonal weights {} vs gradient entries {}",
                        w.len(),
                        g.len()
                    )));
                }
                let mut out = g.clone();
                for (o, &wi) in out.iter_mut().zip(w.iter()) {
                    *o *= wi * self.step_factor;
                }
                Ok(out)
            }
            PrecondKind::LeftMatrix(s) => {
                if s.nrows() != g.ncols() {
                    return Err(Error::Shape(format!(
                        "left matrix {} vs gradient d_out {}",
                        s.nrows(),
                        g.ncols()
                    )));
                }
                Ok(g.dot(&s.t()) * self.step_factor)
            }
        }
    }

    /// Apply to ghost factors.
    ///
    /// Identity scales `b`; a left matrix maps `(A, B)` to `(A, B S^T)`,
    /// since `(A^T B) S^T = A^T (B S^T)` — the rank structure survives. A
    /// diagonal does not factorize over the outer product, so it
    /// materializes (the sketch path instead interleaves the weights while
    /// streaming; see the sketch module).
    pub fn apply_ghost(&self, g: &GhostFactors) -> Result<Applied> {
        match &self.kind {
            PrecondKind::Identity => Ok(Applied::Ghost(GhostFactors::new(
                g.layer,
                g.a.clone(),
                &g.b * self.step_factor,
            )?)),
            PrecondKind::Diagonal(_) => Ok(Applied::Dense(self.apply_dense(&g.materialize())?)),
            PrecondKind::LeftMatrix(s) => {
                if s.nrows() != g.b.ncols() {
                    return Err(Error::Shape(format!(
                        "left matrix {} vs ghost d_out {}",
                        s.nrows(),
                        g.b.ncols()
                    )));
                }
                Ok(Applied::Ghost(GhostFactors::new(
                    g.layer,
                    g.a.clone(),
                    g.b.dot(&s.t()) * self.step_factor,
                )?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerId;
    use crate::rng::CounterRng;

    fn randn(r: usize, c: usize, key: u64) -> Array2<f64> {
        let mut rng = CounterRng::from_key(&[key]);
        Array2::from_shape_fn((r, c), |_| rng.next_normal())
    }

    fn ghost(key: u64, t: usize, din: usize, dout: usize) -> GhostFactors {
        GhostFactors::new(LayerId(0), randn(t, din, key), randn(t, dout, key + 1)).unwrap()
    }

    #[test]
    fn identity_scales_by_step_factor() {
        let p = Preconditioner { kind: PrecondKind::Identity, step_factor: 0.25 };
        let g = randn(3, 4, 1);
        let out = p.apply_dense(&g).unwrap();
        for (o, i) in out.iter().zip(g.iter()) {
            assert_eq!(*o, i * 0.25);
        }
    }

    #[test]
    fn diagonal_equals_elementwise_product() {
        let g = ghost(5, 4, 3, 5);
        let dense = g.materialize();
        let w: Vec<f64> = (0..dense.len()).map(|i| 0.1 + i as f64 * 0.01).collect();
        let p = Preconditioner { kind: PrecondKind::Diagonal(w.clone()), step_factor: 2.0 };
        let out = p.apply_ghost(&g).unwrap().materialize();
        for (k, (&o, &gv)) in out.iter().zip(dense.iter()).enumerate() {
            assert!((o - gv * w[k] * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn left_matrix_ghost_path_matches_dense_oracle() {
        let g = ghost(9, 6, 4, 5);
        let s = randn(5, 5, 30);
        let p = Preconditioner { kind: PrecondKind::LeftMatrix(s.clone()), step_factor: 0.7 };
        let via_ghost = p.apply_ghost(&g).unwrap().materialize();
        let dense_oracle = g.materialize().dot(&s.t()) * 0.7;
        for (a, b) in via_ghost.iter().zip(dense_oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn diagonal_weights_must_be_positive() {
        let p = Preconditioner { kind: PrecondKind::Diagonal(vec![1.0, 0.0]), step_factor: 1.0 };
        assert!(p.validate().is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = randn(3, 4, 2);
        let p = Preconditioner {
            kind: PrecondKind::LeftMatrix(Array2::eye(3)),
            step_factor: 1.0,
        };
        assert!(p.apply_dense(&g).is_err());
    }
}
