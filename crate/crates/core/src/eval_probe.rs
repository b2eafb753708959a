//! Representation probes on frozen features: cosine kNN voting, a linear
//! softmax head, and neighbor purity.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{cosine_matrix, Tape, Tensor};
use crate::pipeline::Sgd;
use crate::rng::rng_for;

/// Query rows per block of the cosine matrix.
const BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Knn,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub accuracy: f64,
    /// Indexed by label; `None` for labels absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub config: serde_json::Value,
    pub seed: u64,
}

fn report(
    kind: ProbeKind,
    predicted: &[usize],
    truth: &[usize],
    config: serde_json::Value,
    seed: u64,
) -> ProbeReport {
    let classes = truth.iter().chain(predicted).max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let per_class_accuracy = counts
        .iter()
        .zip(&hits)
        .map(|(&c, &h)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        hits.iter().sum::<usize>() as f64 / truth.len() as f64
    };
    ProbeReport {
        kind,
        accuracy,
        per_class_accuracy,
        class_counts: counts,
        config,
        seed,
    }
}

fn check_features(feats: &Tensor, labels: &[usize], what: &str) -> Result<()> {
    if feats.shape().len() != 2 || feats.rows() != labels.len() {
        return Err(contract(format!(
            "{what}: {} labels for features of shape {:?}",
            labels.len(),
            feats.shape()
        )));
    }
    Ok(())
}

/// Best-first: higher score, then smaller label, then smaller index.
fn by_score_label(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// The `k` best `(score, label, index)` triples of one row, best first.
fn top_k_row(scores: &[f64], labels: &[usize], k: usize, skip: Option<usize>) -> Vec<(f64, usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(j, &s)| (s, labels[j], j))
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_score_label);
        cand.truncate(k);
    }
    cand.sort_by(by_score_label);
    cand
}

/// Majority vote; ties go to the smaller mean cosine distance, then to the
/// smaller label.
fn vote(hits: &[(f64, usize, usize)]) -> usize {
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(s, label, _) in hits {
        let e = tally.entry(label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += 1.0 - s;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (&label, &(count, dist)) in &tally {
        let mean = dist / count as f64;
        let better = match best {
            None => true,
            Some((_, bc, bm)) => count > bc || (count == bc && mean < bm),
        };
        if better {
            best = Some((label, count, mean));
        }
    }
    best.map_or(0, |b| b.0)
}

/// Row-blocked cosine scores of `queries` against `base`, mapped per row.
fn map_rows<T: Send>(
    queries: &Tensor,
    base: &Tensor,
    f: impl Fn(usize, &[f64]) -> T + Sync,
) -> Result<Vec<T>> {
    let n = queries.rows();
    let blocks: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let out: Vec<Vec<T>> = blocks
        .into_par_iter()
        .map(|start| -> Result<Vec<T>> {
            let idx: Vec<usize> = (start..(start + BLOCK).min(n)).collect();
            let sims = cosine_matrix(&queries.select_rows(&idx), base)?;
            Ok(idx.iter().enumerate().map(|(r, &i)| f(i, sims.row(r))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Cosine kNN classifier evaluated on the test set.
pub fn knn_probe(
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    test_labels: &[usize],
    k: usize,
) -> Result<ProbeReport> {
    check_features(train_feats, train_labels, "knn train")?;
    check_features(test_feats, test_labels, "knn test")?;
    if train_labels.is_empty() {
        return Err(contract("knn probe needs a non-empty training set"));
    }
    if k == 0 {
        return Err(contract("knn probe needs k ≥ 1"));
    }
    if train_feats.cols() != test_feats.cols() {
        return Err(crate::error::shape_err(
            "knn_probe",
            train_feats.shape(),
            test_feats.shape(),
        ));
    }
    let predicted = map_rows(test_feats, train_feats, |_, row| {
        vote(&top_k_row(row, train_labels, k, None))
    })?;
    Ok(report(
        ProbeKind::Knn,
        &predicted,
        test_labels,
        serde_json::json!({ "k": k }),
        0,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Per-column mean and std (floored) of `x`.
fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in x.row_iter() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-8)).collect())
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % d]) / std[i % d])
        .collect();
    Tensor::from_parts(vec![x.rows(), d], data)
}

/// Trains `W, b` with softmax cross-entropy on standardized training
/// features and reports test accuracy.
pub fn linear_probe(
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    test_labels: &[usize],
    cfg: &LinearProbeConfig,
) -> Result<ProbeReport> {
    check_features(train_feats, train_labels, "linear train")?;
    check_features(test_feats, test_labels, "linear test")?;
    let d = train_feats.cols();
    if d == 0 || train_feats.rows() == 0 {
        return Err(contract("linear probe needs non-empty, non-zero-width features"));
    }
    if test_feats.cols() != d {
        return Err(crate::error::shape_err(
            "linear_probe",
            train_feats.shape(),
            test_feats.shape(),
        ));
    }
    let first = train_labels[0];
    if train_labels.iter().all(|&l| l == first) {
        return Err(contract("linear probe needs at least two classes"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be at least 1".into()));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |m| m + 1);
    let (mean, std) = column_moments(train_feats);
    let xs = standardize(train_feats, &mean, &std);
    let xt = standardize(test_feats, &mean, &std);

    let mut params = BTreeMap::from([
        ("w".to_string(), Tensor::zeros(&[d, classes])),
        ("b".to_string(), Tensor::zeros(&[classes])),
    ]);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let n = xs.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &[0x11E, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let w = tape.param(params["w"].clone());
            let b = tape.param(params["b"].clone());
            let x = tape.constant(xs.select_rows(chunk));
            let h = tape.matmul(x, w)?;
            let logits = tape.add_bias(h, b)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            let g = tape.backward(loss)?;
            let grads = BTreeMap::from([
                ("w".to_string(), g.get_or_zeros(w, &params["w"])),
                ("b".to_string(), g.get_or_zeros(b, &params["b"])),
            ]);
            opt.step(&mut params, &grads, cfg.lr)?;
        }
    }
    let logits = crate::numerics::matmul(&xt, &params["w"])?;
    let bias = params["b"].data();
    let predicted: Vec<usize> = logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..classes {
                if row[c] + bias[c] > row[best] + bias[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(report(
        ProbeKind::Linear,
        &predicted,
        test_labels,
        serde_json::to_value(cfg).expect("plain struct"),
        cfg.seed,
    ))
}

/// Mean fraction of each sample's `k` nearest cosine neighbors (itself
/// excluded) that share its label.
pub fn neighbor_purity(feats: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check_features(feats, labels, "neighbor_purity")?;
    let n = labels.len();
    if k == 0 || k >= n {
        return Err(contract(format!(
            "neighbor purity needs 1 ≤ k < n, got k = {k}, n = {n}"
        )));
    }
    let fractions = map_rows(feats, feats, |i, row| {
        let hits = top_k_row(row, labels, k, Some(i));
        hits.iter().filter(|h| h.1 == labels[i]).count() as f64 / k as f64
    })?;
    Ok(fractions.iter().sum::<f64>() / n as f64)
}
