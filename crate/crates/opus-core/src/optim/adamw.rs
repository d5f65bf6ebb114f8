//! AdamW with decoupled weight decay, plus the frozen diagonal
//! preconditioner and the linearized one-step update it induces.

use crate::error::{Error, Result};

use super::precond::{PrecondKind, Preconditioner};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moment state for one parameter tensor (flat layout).
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps; bias correction on step t uses t = completed + 1.
    pub t: u64,
    pub hyper: AdamWHyper,
}

impl AdamWState {
    pub fn new(len: usize, hyper: AdamWHyper) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, hyper }
    }

    /// One AdamW step:
    ///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
    ///   theta <- theta - a_t mhat / (sqrt(vhat) + eps) - a_t lambda theta
    /// with mhat = m/(1-b1^t), vhat = v/(1-b2^t). Rejects non-finite
    /// gradients without touching any state.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_mult: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adamw state len {} vs params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adamw gradient".into()));
        }
        let h = &self.hyper;
        self.t += 1;
        let t = self.t as i32;
        let alpha = h.lr * lr_mult;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= alpha * mhat / (vhat.sqrt() + h.eps) + alpha * h.weight_decay * params[i];
        }
        Ok(())
    }
}

/// Frozen diagonal preconditioner at the upcoming step:
///   P = C_t Diag(1 / (sqrt(vbar) + eps)),
///   vbar = b2 v_{t-1} / (1 - b2^t),  C_t = a_t (1 - b1) / (1 - b1^t).
/// With empty state (t = 0) this degrades to Diag(1/eps) with C = a_t,
/// the bias-correction limit.
pub fn adamw_preconditioner(state: &AdamWState, lr_mult: f64) -> Preconditioner {
    let h = &state.hyper;
    let t_next = (state.t + 1) as i32;
    let alpha = h.lr * lr_mult;
    let c = alpha * (1.0 - h.beta1) / (1.0 - h.beta1.powi(t_next));
    let bc2 = 1.0 - h.beta2.powi(t_next);
    let weights = state
        .v
        .iter()
        .map(|&v| 1.0 / ((h.beta2 * v / bc2).sqrt() + h.eps))
        .collect();
    Preconditioner { kind: PrecondKind::Diagonal(weights), step_factor: c }
}

/// Linearized one-step update with frozen RMS geometry:
///   delta = -A_t D m_{t-1} - a_t lambda theta - C_t D g,
/// where D = 1/(sqrt(vbar) + eps), evaluated at the state's upcoming step.
pub fn linearized_update(state: &AdamWState, params: &[f64], grads: &[f64], lr_mult: f64) -> Vec<f64> {
    let h = &state.hyper;
    let t_next = (state.t + 1) as i32;
    let alpha = h.lr * lr_mult;
    let bc1 = 1.0 - h.beta1.powi(t_next);
    let bc2 = 1.0 - h.beta2.powi(t_next);
    let a_t = alpha * h.beta1 / bc1;
    let c_t = alpha * (1.0 - h.beta1) / bc1;
    (0..params.len())
        .map(|i| {
            let d = 1.0 / ((h.beta2 * state.v[i] / bc2).sqrt() + h.eps);
            -a_t * d * state.m[i] - alpha * h.weight_decay * params[i] - c_t * d * grads[i]
        })
        .collect()
}
