//! Update rules (SGD, AdamW, Muon) and extraction of the frozen
//! optimizer-induced preconditioner used for scoring.

mod adamw;
mod muon;
mod precond;
mod schedule;

pub use adamw::{adamw_preconditioner, linearized_update, AdamWHyper, AdamWState};
pub use muon::{effective_lr, muon_preconditioner, newton_schulz, MuonHyper, MuonState};
pub use precond::{Applied, PrecondKind, Preconditioner};
pub use schedule::lr_multiplier;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerInfo, ModelState, OptimClass, Param, ParamShape};

/// Plain SGD with decoupled weight decay: theta <- theta - eta * (g + lambda * theta).
pub fn sgd_step(params: &mut [f64], grads: &[f64], eta: f64, lambda: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= eta * (g + lambda * *p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
    MuonHybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub choice: OptimizerKind,
    pub lr_sgd: f64,
    pub lr_adam: f64,
    pub lr_muon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mu_start: f64,
    pub mu_end: f64,
    /// Fraction of total steps over which mu warms from start to end.
    pub mu_warmup_fraction: f64,
    pub ns_steps: usize,
    pub ns_coeffs: (f64, f64, f64),
    /// Global gradient-norm clip threshold applied to update-batch mean
    /// gradients (never to scoring gradients).
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            choice: OptimizerKind::MuonHybrid,
            lr_sgd: 0.1,
            lr_adam: 2e-3,
            lr_muon: 1e-2,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            mu_start: 0.85,
            mu_end: 0.95,
            mu_warmup_fraction: 0.05,
            ns_steps: 5,
            ns_coeffs: (3.4445, -4.7750, 2.0315),
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(Error::Config("adamw eps must be positive".into()));
        }
        if self.ns_steps < 1 {
            return Err(Error::Config("ns_steps must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer slot.
#[derive(Debug, Clone)]
pub enum Slot {
    Sgd,
    Adam(AdamWState),
    Muon(MuonState),
}

/// Coordinator that owns one slot per registry entry and applies the
/// configured update rule class-by-class.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Completed optimizer steps.
    pub step_count: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(model: &ModelState, config: OptimizerConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let mu_warmup_steps = (config.mu_warmup_fraction * total_steps as f64).ceil() as u64;
        let adam_hyper = AdamWHyper {
            lr: config.lr_adam,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        };
        let muon_hyper = MuonHyper {
            lr: config.lr_muon,
            mu_start: config.mu_start,
            mu_end: config.mu_end,
            mu_warmup_steps,
            ns_steps: config.ns_steps,
            ns_coeffs: config.ns_coeffs,
        };
        let slots = model
            .registry
            .iter()
            .map(|info| match config.choice {
                OptimizerKind::Sgd => Slot::Sgd,
                OptimizerKind::Adamw => Slot::Adam(AdamWState::new(info.shape.len(), adam_hyper.clone())),
                OptimizerKind::MuonHybrid => match (info.class, info.shape) {
                    (OptimClass::Muon, ParamShape::Matrix(r, c)) => {
                        Slot::Muon(MuonState::new(r, c, muon_hyper.clone()))
                    }
                    _ => Slot::Adam(AdamWState::new(info.shape.len(), adam_hyper.clone())),
                },
            })
            .collect();
        Ok(Self { config, step_count: 0, slots })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Slot] {
        &mut self.slots
    }

    /// One optimizer step over all parameters. Rejects the whole step if any
    /// gradient entry is non-finite (no state is mutated in that case).
    pub fn step(&mut self, params: &mut [Param], grads: &[Param], lr_mult: f64) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Shape("optimizer/registry size mismatch".into()));
        }
        for g in grads {
            let finite = match g {
                Param::Matrix(m) => m.iter().all(|x| x.is_finite()),
                Param::Vector(v) => v.iter().all(|x| x.is_finite()),
            };
            if !finite {
                return Err(Error::NonFinite("gradient entries".into()));
            }
        }
        let step_index = self.step_count;
        for ((slot, param), grad) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads) {
            match slot {
                Slot::Sgd => {
                    let eta = self.config.lr_sgd * lr_mult;
                    let lambda = self.config.weight_decay;
                    match (param, grad) {
                        (Param::Matrix(p), Param::Matrix(g)) => {
                            sgd_step(p.as_slice_mut().unwrap(), g.as_slice().unwrap(), eta, lambda)
                        }
                        (Param::Vector(p), Param::Vector(g)) => {
                            sgd_step(p.as_slice_mut().unwrap(), g.as_slice().unwrap(), eta, lambda)
                        }
                        _ => return Err(Error::Shape("param/grad kind mismatch".into())),
                    }
                }
                Slot::Adam(state) => match (param, grad) {
                    (Param::Matrix(p), Param::Matrix(g)) => {
                        state.step(p.as_slice_mut().unwrap(), g.as_slice().unwrap(), lr_mult)?
                    }
                    (Param::Vector(p), Param::Vector(g)) => {
                        state.step(p.as_slice_mut().unwrap(), g.as_slice().unwrap(), lr_mult)?
                    }
                    _ => return Err(Error::Shape("param/grad kind mismatch".into())),
                },
                Slot::Muon(state) => match (param, grad) {
                    (Param::Matrix(p), Param::Matrix(g)) => state.step(p, g, step_index, lr_mult),
                    _ => {
                        return Err(Error::Shape(
                            "muon update applied to non-matrix parameter".into(),
                        ))
                    }
                },
            }
        }
        self.step_count += 1;
        Ok(())
    }

    /// Frozen preconditioner for one layer at the current step.
    ///
    /// For Muon layers the reference direction defaults to the momentum
    /// buffer; when that buffer is still zero, `fallback_q` (the proxy-batch
    /// mean gradient) is used instead.
    pub fn extract_preconditioner(
        &self,
        layer: &LayerInfo,
        lr_mult: f64,
        fallback_q: Option<&Array2<f64>>,
    ) -> Result<Preconditioner> {
        let slot = self
            .slots
            .get(layer.id.index())
            .ok_or_else(|| Error::LayerMismatch(format!("no slot for layer {}", layer.name)))?;
        match slot {
            Slot::Sgd => Ok(Preconditioner {
                kind: PrecondKind::Identity,
                step_factor: self.config.lr_sgd * lr_mult,
            }),
            Slot::Adam(state) => Ok(adamw_preconditioner(state, lr_mult)),
            Slot::Muon(state) => {
                let (rows_in, cols_out) = match layer.shape {
                    ParamShape::Matrix(r, c) => (r, c),
                    ParamShape::Vector(_) => {
                        return Err(Error::LayerMismatch(format!(
                            "muon preconditioner on 1-D layer {}",
                            layer.name
                        )))
                    }
                };
                // Output dim plays the paper's "rows" role in the rescale.
                let lr_eff = effective_lr(self.config.lr_muon * lr_mult, cols_out, rows_in);
                let mu = state.mu_at(self.step_count);
                let buffer_norm = state.m.iter().map(|x| x * x).sum::<f64>().sqrt();
                let q_ref: &Array2<f64> = if buffer_norm > 0.0 {
                    &state.m
                } else if let Some(q) = fallback_q {
                    q
                } else {
                    &state.m // zero buffer, no fallback: S collapses to a*I
                };
                Ok(muon_preconditioner(q_ref, state.hyper.ns_coeffs, lr_eff, mu))
            }
        }
    }
}

/// Scale mean gradients so their global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Param], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        match g {
            Param::Matrix(m) => sq += m.iter().map(|x| x * x).sum::<f64>(),
            Param::Vector(v) => sq += v.iter().map(|x| x * x).sum::<f64>(),
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.flat_mut_apply(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_gradient_no_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 3.0];
        let q = p.clone();
        sgd_step(&mut p, &[0.0; 3], 0.5, 0.0);
        assert_eq!(p, q);
    }

    #[test]
    fn sgd_direct_evaluation() {
        // theta=1, g=2, eta=0.5, lambda=0 -> theta=0
        let mut p = vec![1.0];
        sgd_step(&mut p, &[2.0], 0.5, 0.0);
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn sgd_pure_decay() {
        let (eta, lambda) = (0.1, 0.3);
        let mut p = vec![2.0];
        sgd_step(&mut p, &[0.0], eta, lambda);
        assert!((p[0] - 2.0 * (1.0 - eta * lambda)).abs() < 1e-15);
    }

    #[test]
    fn clip_rescales_to_threshold() {
        let mut grads = vec![Param::Vector(ndarray::arr1(&[3.0, 4.0]))];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let v = grads[0].as_vector();
        let new_norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = vec![Param::Vector(ndarray::arr1(&[0.3, 0.4]))];
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads[0].as_vector()[0], 0.3);
    }
}
