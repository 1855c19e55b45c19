//! Linear warm-up followed by half-cosine decay.

/// Learning rate at `step` of `total_steps`.
///
/// Ramps linearly from 0 to `max_lr` over `warmup_steps`, then decays along a
/// half cosine to 0 at `total_steps`. When there is no decay phase
/// (`total_steps <= warmup_steps`) the ramp value is returned.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, max_lr: f64) -> f64 {
    if step < warmup_steps {
        return max_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return max_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
