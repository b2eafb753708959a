//! Soft weights for selected neighbors via parameter-free cross-attention.
//!
//! Both projections of the attention block are identity maps, so the score
//! of neighbor `i` is a softmax over the cosine similarities between the
//! anchor projection and the `K` neighbors. Each anchor's scores are then
//! divided by their maximum, which pins the best neighbor at weight 1.
//! The whole computation happens on plain values and never touches a tape:
//! the weights enter the loss as constants.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, l2_normalize, softmax};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivenessWeights {
    /// Softmax over the `K` neighbors; sums to 1.
    pub raw_scores: Vec<f64>,
    /// Scaling factor; the maximum raw score.
    pub gamma: f64,
    /// `raw_scores / gamma`, in `(0, 1]`.
    pub weights: Vec<f64>,
    /// Weight of the anchor's own second view.
    pub w0: f64,
}

impl PositivenessWeights {
    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

pub fn positiveness<N: AsRef<[f64]>>(y1: &[f64], neighbors: &[N]) -> PositivenessWeights {
    if neighbors.is_empty() {
        return PositivenessWeights {
            raw_scores: Vec::new(),
            gamma: 1.0,
            weights: Vec::new(),
            w0: 1.0,
        };
    }
    let q = l2_normalize(y1, 1e-12);
    let cos: Vec<f64> = neighbors
        .iter()
        .map(|n| dot(&q, &l2_normalize(n.as_ref(), 1e-12)))
        .collect();
    let raw_scores = softmax(&cos);
    let gamma = raw_scores.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let weights = raw_scores.iter().map(|s| s / gamma).collect();
    PositivenessWeights {
        raw_scores,
        gamma,
        weights,
        w0: 1.0,
    }
}
