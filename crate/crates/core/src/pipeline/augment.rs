//! Two-view augmentation for vector samples.
//!
//! Each view applies, in order: a contiguous (wrapping) crop that zeroes the
//! coordinates outside the kept window, additive Gaussian noise, a sign flip
//! of one contiguous block, and multiplicative per-coordinate jitter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Kept fraction of coordinates is drawn uniformly from
    /// `[crop_min, crop_max]`.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Scale kept coordinates by `dim / kept` instead of leaving them as is.
    pub crop_rescale: bool,
    pub flip_prob: f64,
    /// Length of the sign-flipped block.
    pub flip_block: usize,
    /// Std of the multiplicative factor `1 + jitter_std·ε` per coordinate.
    pub jitter_std: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min: 0.6,
            crop_max: 1.0,
            crop_rescale: false,
            flip_prob: 0.0,
            flip_block: 4,
            jitter_std: 0.1,
            noise_std: 0.3,
        }
    }
}

impl AugmentConfig {
    /// Every component switched off: views equal the sample.
    pub fn identity() -> Self {
        Self {
            crop_min: 1.0,
            crop_max: 1.0,
            crop_rescale: false,
            flip_prob: 0.0,
            flip_block: 0,
            jitter_std: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 < self.crop_min && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return bad(format!(
                "augment.crop_min/crop_max must satisfy 0 < min ≤ max ≤ 1, got {} and {}",
                self.crop_min, self.crop_max
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("augment.flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        for (name, v) in [("jitter_std", self.jitter_std), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("augment.{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

fn view(sample: &[f64], rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Vec<f64> {
    let d = sample.len();
    let mut out = sample.to_vec();
    if d == 0 {
        return out;
    }
    let frac = if cfg.crop_max > cfg.crop_min {
        rng.random_range(cfg.crop_min..=cfg.crop_max)
    } else {
        cfg.crop_max
    };
    let kept = ((frac * d as f64).round() as usize).clamp(1, d);
    if kept < d {
        let start = rng.random_range(0..d);
        let scale = if cfg.crop_rescale { d as f64 / kept as f64 } else { 1.0 };
        for (j, x) in out.iter_mut().enumerate() {
            let offset = (j + d - start) % d;
            if offset < kept {
                *x *= scale;
            } else {
                *x = 0.0;
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for x in out.iter_mut() {
            *x += noise.sample(rng);
        }
    }
    if cfg.flip_prob > 0.0 && cfg.flip_block > 0 && rng.random_bool(cfg.flip_prob) {
        let start = rng.random_range(0..d);
        for j in 0..cfg.flip_block.min(d) {
            out[(start + j) % d] *= -1.0;
        }
    }
    if cfg.jitter_std > 0.0 {
        let jitter = Normal::new(1.0, cfg.jitter_std).expect("validated std");
        for x in out.iter_mut() {
            *x *= jitter.sample(rng);
        }
    }
    out
}

/// Two views of `sample`. View `v` draws from `derive_seed(seed, [v])`, so
/// callers fold the sample index (and step) into `seed`.
pub fn augment(sample: &[f64], seed: u64, cfg: &AugmentConfig) -> (Vec<f64>, Vec<f64>) {
    let mut r1 = rng_for(seed, &[0]);
    let mut r2 = rng_for(seed, &[1]);
    (view(sample, &mut r1, cfg), view(sample, &mut r2, cfg))
}

/// Seed for sample `index` at optimizer step `step`.
pub fn sample_seed(base: u64, step: u64, index: u64) -> u64 {
    derive_seed(base, &[0xA06, step, index])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(d: usize) -> Vec<f64> {
        (0..d).map(|j| (j as f64 * 0.37).sin()).collect()
    }

    #[test]
    fn identity_config_returns_the_sample() {
        let x = sample(16);
        let (a, b) = augment(&x, 3, &AugmentConfig::identity());
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn deterministic_and_views_differ() {
        let x = sample(16);
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&x, 11, &cfg), augment(&x, 11, &cfg));
        let (a, b) = augment(&x, 11, &cfg);
        assert_ne!(a, b);
        assert_ne!(augment(&x, 12, &cfg), augment(&x, 11, &cfg));
    }

    #[test]
    fn noise_only_distortion_matches_configured_std() {
        let cfg = AugmentConfig {
            noise_std: AugmentConfig::default().noise_std,
            ..AugmentConfig::identity()
        };
        let d = 32;
        let x = sample(d);
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for s in 0..1000u64 {
            let (a, _) = augment(&x, sample_seed(5, 0, s), &cfg);
            for (u, v) in a.iter().zip(&x) {
                sum_sq += (u - v) * (u - v);
                count += 1;
            }
        }
        // variance estimate of a Gaussian: sd(s²) = σ²·sqrt(2/(n−1))
        let var = sum_sq / count as f64;
        let sigma2 = cfg.noise_std * cfg.noise_std;
        let sd = sigma2 * (2.0 / (count as f64 - 1.0)).sqrt();
        assert!((var - sigma2).abs() < 3.0 * sd, "{var} vs {sigma2}");
    }

    #[test]
    fn crop_zeroes_a_wrapping_window() {
        let cfg = AugmentConfig {
            crop_min: 0.5,
            crop_max: 0.5,
            ..AugmentConfig::identity()
        };
        let x = vec![1.0; 10];
        let (a, _) = augment(&x, 2, &cfg);
        assert_eq!(a.iter().filter(|&&v| v == 0.0).count(), 5);
        let rescaled = AugmentConfig { crop_rescale: true, ..cfg };
        let (b, _) = augment(&x, 2, &rescaled);
        assert_eq!(b.iter().filter(|&&v| v == 2.0).count(), 5);
    }

    #[test]
    fn flip_negates_one_block() {
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            flip_block: 3,
            ..AugmentConfig::identity()
        };
        let x = vec![1.0; 8];
        let (a, _) = augment(&x, 4, &cfg);
        assert_eq!(a.iter().filter(|&&v| v == -1.0).count(), 3);
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { crop_min: 0.0, ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { noise_std: -1.0, ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
    }
}
