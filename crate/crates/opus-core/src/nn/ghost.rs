//! Ghost factors: the `(A, B)` pair of a linear layer whose product `A^T B`
//! is the per-sample weight gradient.

use ndarray::Array2;

use super::LayerId;
use crate::error::{Error, Result};

/// Per-sample factor pair for one registered 2-D layer.
///
/// `a` holds the layer's input activations per position (T x d_in) and `b`
/// the loss gradient with respect to the layer output per position
/// (T x d_out), with the per-sample loss normalization already folded into
/// `b`. `a^T b` reconstructs the per-sample weight gradient.
#[derive(Debug, Clone)]
pub struct GhostFactors {
    pub layer: LayerId,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl GhostFactors {
    pub fn new(layer: LayerId, a: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        if a.nrows() != b.nrows() {
            return Err(Error::Shape(format!(
                "ghost factors disagree on positions: {} vs {}",
                a.nrows(),
                b.nrows()
            )));
        }
        Ok(Self { layer, a, b })
    }

    /// (d_in, d_out) of the gradient this pair reconstructs.
    pub fn grad_shape(&self) -> (usize, usize) {
        (self.a.ncols(), self.b.ncols())
    }

    /// Materialize the full per-sample gradient `A^T B`.
    ///
    /// The production scoring path never calls this; it is the reference the
    /// streamed sketch path is checked against.
    pub fn materialize(&self) -> Array2<f64> {
        self.a.t().dot(&self.b)
    }
}

/// All samples' ghost factors for one layer.
#[derive(Debug, Clone)]
pub struct LayerGhosts {
    pub layer: LayerId,
    pub grad_shape: (usize, usize),
    pub samples: Vec<GhostFactors>,
}

impl LayerGhosts {
    /// Mean gradient over the samples, materialized (test/oracle path).
    pub fn mean_gradient(&self) -> Array2<f64> {
        let mut acc = Array2::zeros(self.grad_shape);
        for g in &self.samples {
            acc += &g.materialize();
        }
        acc / self.samples.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_activation_gives_zero_gradient() {
        let g = GhostFactors::new(LayerId(0), Array2::zeros((3, 2)), Array2::ones((3, 4))).unwrap();
        assert!(g.materialize().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn basis_outer_product() {
        // T=1, A=e_i, B=e_j -> single 1 at (i, j)
        let a = array![[0.0, 1.0, 0.0]];
        let b = array![[0.0, 0.0, 0.0, 1.0]];
        let g = GhostFactors::new(LayerId(0), a, b).unwrap().materialize();
        for i in 0..3 {
            for j in 0..4 {
                let want = if (i, j) == (1, 3) { 1.0 } else { 0.0 };
                assert_eq!(g[[i, j]], want);
            }
        }
    }

    #[test]
    fn gram_trace_identity() {
        // <A^T B, A'^T B'> = tr((A A'^T)^T (B B'^T)), checked by direct evaluation.
        let mut rng = crate::rng::CounterRng::from_key(&[11]);
        let rand = |r: usize, c: usize, rng: &mut crate::rng::CounterRng| {
            Array2::from_shape_fn((r, c), |_| rng.next_normal())
        };
        let (a, b) = (rand(4, 5, &mut rng), rand(4, 6, &mut rng));
        let (a2, b2) = (rand(4, 5, &mut rng), rand(4, 6, &mut rng));
        let g1 = GhostFactors::new(LayerId(0), a.clone(), b.clone()).unwrap().materialize();
        let g2 = GhostFactors::new(LayerId(0), a2.clone(), b2.clone()).unwrap().materialize();
        let lhs: f64 = (&g1 * &g2).sum();
        let gram_a = a.dot(&a2.t());
        let gram_b = b.dot(&b2.t());
        let rhs: f64 = (&gram_a * &gram_b).sum();
        assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
    }
}
