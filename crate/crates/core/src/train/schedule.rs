use super::TrainConfig;

/// Warmup length: `round(warmup_ratio · total)`.
pub fn warmup_steps(total: usize, cfg: &TrainConfig) -> usize {
    ((cfg.warmup_ratio * total as f64).round() as usize).min(total)
}

/// Linear ramp from 0 to `lr` over the warmup steps, then linear decay to
/// 0 at `t = total`. Optimizer step `k` (0-based) uses `lr_at(k)`.
pub fn lr_at(t: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warmup = warmup_steps(total, cfg);
    if t < warmup {
        cfg.lr * t as f64 / warmup as f64
    } else if t >= total {
        0.0
    } else {
        cfg.lr * (total - t) as f64 / (total - warmup) as f64
    }
}
