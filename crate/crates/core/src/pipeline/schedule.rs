//! Learning-rate schedule: linear warm-up from a small floor to the scaled
//! base rate, then half-cosine decay to zero.

use serde::{Deserialize, Serialize};

/// First learning rate of the ramp.
pub const LR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// Linear scaling rule: `base_lr · N / 256`.
    pub fn peak(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Learning rate for `step` of a `total_steps` run.
pub fn lr_at(step: usize, total_steps: usize, s: &LrSchedule) -> f64 {
    let peak = s.peak();
    let warm = s.warmup_steps.min(total_steps);
    if step < warm {
        return LR_FLOOR + (peak - LR_FLOOR) * step as f64 / warm as f64;
    }
    let span = total_steps.saturating_sub(warm);
    if span == 0 {
        return peak;
    }
    let t = (step - warm).min(span) as f64 / span as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: LrSchedule = LrSchedule {
        base_lr: 0.4,
        batch_size: 64,
        warmup_steps: 10,
    };

    #[test]
    fn ramp_starts_at_floor_and_reaches_peak() {
        assert_eq!(lr_at(0, 110, &S), 1e-6);
        assert_eq!(S.peak(), 0.1);
        assert_eq!(lr_at(10, 110, &S), 0.1);
        let mid = lr_at(5, 110, &S);
        assert!((mid - (1e-6 + (0.1 - 1e-6) / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_midpoint_is_half_peak() {
        let lr = lr_at(60, 110, &S);
        let closed = 0.1 * (std::f64::consts::FRAC_PI_4).cos().powi(2);
        assert!((lr - closed).abs() < 1e-15);
        assert!((lr - 0.05).abs() < 1e-15);
    }

    #[test]
    fn decays_monotonically_to_zero() {
        let lrs: Vec<f64> = (10..=110).map(|s| lr_at(s, 110, &S)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.last().unwrap().abs() < 1e-15);
    }

    #[test]
    fn no_warmup() {
        let s = LrSchedule { warmup_steps: 0, ..S };
        assert_eq!(lr_at(0, 10, &s), 0.1);
    }
}
