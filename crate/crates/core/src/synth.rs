//! Gaussian-cluster datasets with well-separated unit-norm class centers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::numerics::{dot, l2_normalize, Tensor};
use crate::rng::rng_for;

/// Centers must be at least this far apart in angle.
pub const MIN_CENTER_ANGLE_DEG: f64 = 60.0;

const DRAWS_PER_CENTER: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 400,
            dim: 32,
            spread: 0.35,
            seed: 0,
        }
    }
}

/// Random unit directions accepted greedily when every pairwise cosine is
/// at most `cos(60°)`.
pub fn centers(classes: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dim == 0 {
        return Err(Error::Config("synthetic data needs dim ≥ 1".into()));
    }
    let max_cos = MIN_CENTER_ANGLE_DEG.to_radians().cos() + 1e-12;
    let mut rng = rng_for(seed, &[0xC3A7]);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut accepted = None;
        for _ in 0..DRAWS_PER_CENTER {
            let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let v = l2_normalize(&raw, 1e-12);
            if v.iter().all(|x| *x == 0.0) {
                continue;
            }
            if out.iter().all(|u| dot(u, &v) <= max_cos) {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => out.push(v),
            None => {
                return Err(Error::Config(format!(
                    "could not place center {} of {classes} in {dim} dimensions \
                     with {MIN_CENTER_ANGLE_DEG}° separation",
                    c + 1
                )))
            }
        }
    }
    Ok(out)
}

/// `classes × per_class` samples in class-major order, each a center plus
/// isotropic Gaussian noise of std `spread`, rounded to `f32` precision so
/// the in-memory copy equals what a dataset file stores.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if !(cfg.spread >= 0.0 && cfg.spread.is_finite()) {
        return Err(Error::Config(format!("spread must be non-negative, got {}", cfg.spread)));
    }
    if cfg.classes == 0 || cfg.classes > 256 {
        return Err(Error::Config(format!(
            "classes must lie in 1..=256, got {}",
            cfg.classes
        )));
    }
    let cs = centers(cfg.classes, cfg.dim, cfg.seed)?;
    let mut rng = rng_for(cfg.seed, &[0x5A3F]);
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (label, c) in cs.iter().enumerate() {
        for _ in 0..cfg.per_class {
            for &x in c {
                let e: f64 = rng.sample(StandardNormal);
                data.push(f64::from((x + cfg.spread * e) as f32));
            }
            labels.push(label);
        }
    }
    Dataset::new(Tensor::new(&[n, cfg.dim], data)?, labels, cfg.classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_probe::knn_probe;

    #[test]
    fn single_class() {
        let ds = generate(&SynthConfig { classes: 1, per_class: 10, ..Default::default() }).unwrap();
        assert!(ds.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn zero_spread_gives_centers() {
        let cfg = SynthConfig { classes: 3, per_class: 4, dim: 8, spread: 0.0, seed: 2 };
        let ds = generate(&cfg).unwrap();
        let cs = centers(3, 8, 2).unwrap();
        for i in 0..ds.len() {
            let c = &cs[ds.labels[i]];
            for (a, b) in ds.features.row(i).iter().zip(c) {
                assert_eq!(*a, f64::from(*b as f32));
            }
        }
    }

    #[test]
    fn centers_are_separated() {
        let cs = centers(8, 16, 5).unwrap();
        for i in 0..cs.len() {
            assert!((dot(&cs[i], &cs[i]) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(&cs[i], &cs[j]) <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn unsatisfiable_separation() {
        assert!(matches!(centers(3, 1, 0), Err(Error::Config(_))));
        assert!(matches!(centers(40, 2, 0), Err(Error::Config(_))));
        assert!(centers(2, 1, 0).is_ok());
    }

    #[test]
    fn tight_clusters_are_knn_separable() {
        let ds = generate(&SynthConfig { classes: 5, per_class: 100, dim: 32, spread: 0.1, seed: 7 }).unwrap();
        let (train, test) = ds.split_every(5);
        let r = knn_probe(&train.features, &train.labels, &test.features, &test.labels, 5).unwrap();
        assert!(r.accuracy >= 0.99, "{}", r.accuracy);
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
