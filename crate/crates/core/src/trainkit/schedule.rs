//! Learning-rate schedule: linear warmup, then cosine decay to zero.

use std::f64::consts::PI;

/// Per-step learning rate. Steps count from zero. The rate climbs linearly
/// over the first `warmup_steps` steps, from `base_lr / warmup_steps` up to
/// `base_lr`, then follows a half cosine that reaches exactly zero at step
/// `total_steps - 1`.
pub fn learning_rate(base_lr: f64, step: u64, warmup_steps: u64, total_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps + 1 {
        return 0.0;
    }
    let span = (total_steps - 1 - warmup_steps) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: f64 = 5e-4;

    #[test]
    fn warmup_starts_at_base_over_warmup_steps() {
        assert_eq!(learning_rate(BASE, 0, 10, 100), BASE / 10.0);
    }

    #[test]
    fn warmup_ends_at_base() {
        assert_eq!(learning_rate(BASE, 9, 10, 100), BASE);
        assert_eq!(learning_rate(BASE, 10, 10, 100), BASE);
    }

    #[test]
    fn final_step_reaches_zero() {
        let last = learning_rate(BASE, 99, 10, 100);
        assert!(last.abs() < 1e-6 * BASE, "final lr {last} is not near zero");
        assert_eq!(last, 0.0);
    }

    #[test]
    fn monotone_within_each_phase() {
        let rates: Vec<f64> = (0..100).map(|t| learning_rate(BASE, t, 10, 100)).collect();
        for t in 1..10 {
            assert!(rates[t] > rates[t - 1], "warmup not rising at step {t}");
        }
        for t in 11..100 {
            assert!(rates[t] <= rates[t - 1], "decay not falling at step {t}");
        }
        assert!(rates.iter().all(|r| *r >= 0.0 && r.is_finite()));
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        assert_eq!(learning_rate(BASE, 0, 0, 50), BASE);
    }

    #[test]
    fn degenerate_spans_stay_finite() {
        assert_eq!(learning_rate(BASE, 5, 5, 6), 0.0);
        assert_eq!(learning_rate(BASE, 0, 0, 1), 0.0);
        assert!(learning_rate(BASE, 200, 10, 100) >= 0.0);
    }
}
