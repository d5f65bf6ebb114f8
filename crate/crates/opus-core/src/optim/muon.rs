//! Muon: EMA momentum on matrix gradients followed by Newton-Schulz
//! orthogonalization, plus the frozen left-matrix preconditioner.

use ndarray::Array2;

use super::precond::{PrecondKind, Preconditioner};

/// Quintic Newton-Schulz iteration.
///
/// The input is normalized by its Frobenius norm (plus a tiny guard) and
/// then iterated X <- aX + b(XX^T)X + c(XX^T)^2 X for `steps` rounds,
/// driving singular values toward 1. A zero matrix is returned unchanged.
pub fn newton_schulz(m: &Array2<f64>, steps: usize, coeffs: (f64, f64, f64)) -> Array2<f64> {
    let (a, b, c) = coeffs;
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return m.clone();
    }
    let mut x = m / (norm + 1e-12);
    // iterate on the wide orientation so the Gram matrix is the small side
    let transposed = x.nrows() > x.ncols();
    if transposed {
        x = x.t().to_owned();
    }
    for _ in 0..steps {
        let p = x.dot(&x.t());
        let poly = &(&p * b) + &(p.dot(&p) * c);
        x = &(&x * a) + &poly.dot(&x);
    }
    if transposed {
        x.t().to_owned()
    } else {
        x
    }
}

/// Shape-dependent learning-rate rescale: eta * sqrt(max(1, rows/cols)),
/// with `rows` the output dimension of the layer.
pub fn effective_lr(eta: f64, rows: usize, cols: usize) -> f64 {
    eta * (rows as f64 / cols as f64).max(1.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuonHyper {
    pub lr: f64,
    pub mu_start: f64,
    pub mu_end: f64,
    pub mu_warmup_steps: u64,
    pub ns_steps: usize,
    pub ns_coeffs: (f64, f64, f64),
}

/// Momentum matrix for one 2-D layer (stored d_in x d_out like the weight).
#[derive(Debug, Clone)]
pub struct MuonState {
    pub m: Array2<f64>,
    pub hyper: MuonHyper,
}

impl MuonState {
    pub fn new(d_in: usize, d_out: usize, hyper: MuonHyper) -> Self {
        Self { m: Array2::zeros((d_in, d_out)), hyper }
    }

    /// Momentum coefficient at a step, linearly warmed from start to end.
    pub fn mu_at(&self, step: u64) -> f64 {
        let h = &self.hyper;
        if h.mu_warmup_steps == 0 || step >= h.mu_warmup_steps {
            h.mu_end
        } else {
            h.mu_start + (h.mu_end - h.mu_start) * step as f64 / h.mu_warmup_steps as f64
        }
    }

    /// One Muon step:
    ///   M <- mu M + (1-mu) g,   q <- (1-mu) g + mu M,
    ///   W <- W - eta_eff * NewtonSchulz(q)
    /// with eta_eff = eta * sqrt(max(1, d_out/d_in)).
    pub fn step(&mut self, w: &mut Array2<f64>, g: &Array2<f64>, step_index: u64, lr_mult: f64) {
        let mu = self.mu_at(step_index);
        self.m = &(&self.m * mu) + &(g * (1.0 - mu));
        let q = &(g * (1.0 - mu)) + &(&self.m * mu);
        let update = newton_schulz(&q, self.hyper.ns_steps, self.hyper.ns_coeffs);
        let lr_eff = effective_lr(self.hyper.lr * lr_mult, w.ncols(), w.nrows());
        *w -= &(update * lr_eff);
    }
}

/// Frozen left-matrix preconditioner from a reference direction:
///   S = aI + bA + cA^2 with A = qtilde^T qtilde (d_out x d_out),
///   qtilde = qbar / ||qbar||_F, step factor kappa = eta_eff * (1 - mu^2).
/// The one-step polynomial is used exactly as the frozen linear map; the
/// runtime optimizer still iterates the full Newton-Schulz.
pub fn muon_preconditioner(
    q_ref: &Array2<f64>,
    coeffs: (f64, f64, f64),
    lr_eff: f64,
    mu: f64,
) -> Preconditioner {
    let (a, b, c) = coeffs;
    let d_out = q_ref.ncols();
    let norm = q_ref.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = if norm == 0.0 {
        Array2::eye(d_out) * a
    } else {
        let qt = q_ref / norm;
        let gram = qt.t().dot(&qt); // d_out x d_out
        let mut s = Array2::eye(d_out) * a;
        s = &s + &(&gram * b);
        s = &s + &(gram.dot(&gram) * c);
        s
    };
    Preconditioner { kind: PrecondKind::LeftMatrix(s), step_factor: lr_eff * (1.0 - mu * mu) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    const COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

    fn randn(r: usize, c: usize, key: u64) -> Array2<f64> {
        let mut rng = CounterRng::from_key(&[key]);
        Array2::from_shape_fn((r, c), |_| rng.next_normal())
    }

    #[test]
    fn zero_matrix_is_fixed_point() {
        let z = Array2::<f64>::zeros((6, 4));
        let out = newton_schulz(&z, 5, COEFFS);
        assert!(out.iter().all(|&x| x == 0.0));
        assert_eq!(out.dim(), (6, 4));
    }

    #[test]
    fn shape_preserved_for_tall_and_wide() {
        for (r, c) in [(8, 3), (3, 8), (5, 5)] {
            let m = randn(r, c, (r * 100 + c) as u64);
            assert_eq!(newton_schulz(&m, 5, COEFFS).dim(), (r, c));
        }
    }

    #[test]
    fn mu_zero_collapses_to_pure_gradient() {
        // with M_old = 0 and mu = 0, q = g exactly
        let g = randn(4, 6, 3);
        let m_old = Array2::<f64>::zeros((4, 6));
        let mu = 0.0;
        let m_new = &(&m_old * mu) + &(&g * (1.0 - mu));
        let q = &(&g * (1.0 - mu)) + &(&m_new * mu);
        assert!(q.iter().zip(g.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn double_smoothed_identity() {
        // q = (1-mu) g + mu M_new  ==  mu^2 M_old + (1-mu^2) g
        let g = randn(5, 7, 9);
        let m_old = randn(5, 7, 10);
        let mu = 0.9;
        let m_new = &(&m_old * mu) + &(&g * (1.0 - mu));
        let q1 = &(&g * (1.0 - mu)) + &(&m_new * mu);
        let q2 = &(&m_old * (mu * mu)) + &(&g * (1.0 - mu * mu));
        for (a, b) in q1.iter().zip(q2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_lr_rescale() {
        assert!((effective_lr(0.01, 128, 64) - 0.01 * 2.0f64.sqrt()).abs() < 1e-18);
        assert_eq!(effective_lr(0.01, 64, 128), 0.01);
        assert_eq!(effective_lr(0.01, 64, 64), 0.01);
    }

    #[test]
    fn mu_warmup_schedule() {
        let hyper = MuonHyper {
            lr: 0.01,
            mu_start: 0.85,
            mu_end: 0.95,
            mu_warmup_steps: 100,
            ns_steps: 5,
            ns_coeffs: COEFFS,
        };
        let st = MuonState::new(2, 2, hyper);
        assert!((st.mu_at(0) - 0.85).abs() < 1e-15);
        assert!((st.mu_at(50) - 0.90).abs() < 1e-15);
        assert!((st.mu_at(100) - 0.95).abs() < 1e-15);
        assert!((st.mu_at(10_000) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_reference_direction_gives_scaled_identity() {
        let q = Array2::<f64>::zeros((3, 4));
        let p = muon_preconditioner(&q, COEFFS, 0.01, 0.95);
        match &p.kind {
            PrecondKind::LeftMatrix(s) => {
                assert_eq!(s.dim(), (4, 4));
                for i in 0..4 {
                    for j in 0..4 {
                        let want = if i == j { COEFFS.0 } else { 0.0 };
                        assert_eq!(s[[i, j]], want);
                    }
                }
            }
            _ => panic!("expected left matrix"),
        }
        assert!((p.step_factor - 0.01 * (1.0 - 0.95 * 0.95)).abs() < 1e-15);
    }

    #[test]
    fn frozen_s_matches_rank_expanded_application() {
        // apply(S, Z) computed densely equals a*Z + b*(Z qt^T) qt + c*(...)^2
        // expanded through the normalized reference direction.
        let q = randn(6, 5, 21);
        let z = randn(6, 5, 22);
        let p = muon_preconditioner(&q, COEFFS, 1.0, 0.0);
        let dense = match &p.kind {
            PrecondKind::LeftMatrix(s) => z.dot(&s.t()),
            _ => panic!(),
        };
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let qt = &q / norm;
        let (a, b, c) = COEFFS;
        // Z A = (Z qt^T) qt with A = qt^T qt; A^2 applied the same way twice
        let za = z.dot(&qt.t()).dot(&qt);
        let zaa = za.dot(&qt.t()).dot(&qt);
        let expanded = &(&z * a) + &(&(&za * b) + &(&zaa * c));
        for (x, y) in dense.iter().zip(expanded.iter()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}
