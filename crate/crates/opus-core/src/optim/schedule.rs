//! Learning-rate schedule: linear warmup, then constant or a linear decay
//! to half the peak rate.

/// Multiplier on the base learning rate at `step` of `total_steps`.
///
/// Warmup runs over ceil(warmup_fraction * total_steps) steps from 0 to 1.
/// Without `decay` the multiplier stays 1 afterwards; with `decay` it falls
/// linearly to 0.5 at the final step: 0.5 * (1 + fraction_remaining).
pub fn lr_multiplier(step: u64, total_steps: u64, warmup_fraction: f64, decay: bool) -> f64 {
    debug_assert!(step <= total_steps);
    let warmup = (warmup_fraction * total_steps as f64).ceil() as u64;
    if warmup > 0 && step < warmup {
        return step as f64 / warmup as f64;
    }
    if !decay || total_steps <= warmup {
        return 1.0;
    }
    let remaining = (total_steps - step) as f64 / (total_steps - warmup) as f64;
    0.5 * (1.0 + remaining)
}
