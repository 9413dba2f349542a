use std::f64::consts::PI;

/// Number of linear warm-up steps: `round(warmup_frac · T)`.
pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    (warmup_frac * total_steps as f64).round() as usize
}

/// Linear warm-up to `lr_max` over the first `Wc` steps, then cosine decay.
pub fn lr_at(step: usize, lr_max: f64, warmup_frac: f64, total_steps: usize) -> f64 {
    let wc = warmup_steps(total_steps, warmup_frac);
    if step < wc {
        return lr_max * (step + 1) as f64 / wc as f64;
    }
    let progress = (step - wc) as f64 / (total_steps - wc) as f64;
    lr_max * 0.5 * (1.0 + (PI * progress).cos())
}
