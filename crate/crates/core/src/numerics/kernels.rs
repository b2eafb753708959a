//! Value-level kernels shared by the tape and by the plain-value API.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// `c (+)= op(a) · op(b)` for row-major `a` (m×k or k×m when transposed)
/// and `b` (k×n or n×k when transposed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths match the (m, k, n) extents and the strides
    // describe row-major storage of exactly those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with four independent accumulators.
///
/// The summation order depends only on the length, so equal inputs always
/// give bit-equal outputs.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Standard matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::checked(vec![m, n], out, "matmul")
}

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let norm = dot(v, v).sqrt().max(eps);
    v.iter().map(|x| x / norm).collect()
}

/// Normalizes each row of a matrix in place.
pub fn normalize_rows_in_place(data: &mut [f64], cols: usize, eps: f64) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_exact_mut(cols) {
        let norm = dot(row, row).sqrt().max(eps);
        row.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Learned affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats) {
        absorb_stats(&mut self.running_mean, &mut self.running_var, stats);
    }
}

/// Per-feature batch mean and biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub n: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn absorb_stats(running_mean: &mut [f64], running_var: &mut [f64], stats: &BatchStats) {
    let unbias = stats.n as f64 / (stats.n as f64 - 1.0);
    for j in 0..running_mean.len() {
        running_mean[j] = BN_MOMENTUM * running_mean[j] + (1.0 - BN_MOMENTUM) * stats.mean[j];
        running_var[j] = BN_MOMENTUM * running_var[j] + (1.0 - BN_MOMENTUM) * stats.var[j] * unbias;
    }
}

pub(crate) fn batch_stats(x: &[f64], n: usize, d: usize) -> BatchStats {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    BatchStats { n, mean, var }
}

/// Train-mode normalization: returns `(x_hat, inv_std, stats)`.
pub(crate) fn bn_train_forward(
    x: &[f64],
    n: usize,
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>, BatchStats)> {
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "train-mode batch norm needs at least 2 rows, got {n}"
        )));
    }
    let stats = batch_stats(x, n, d);
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; n * d];
    for (orow, row) in xhat.chunks_exact_mut(d).zip(x.chunks_exact(d)) {
        for j in 0..d {
            orow[j] = (row[j] - stats.mean[j]) * inv_std[j];
        }
    }
    Ok((xhat, inv_std, stats))
}

/// Batch normalization over the rows of `x: n×d`.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates; eval mode uses the running estimates unchanged.
pub fn batchnorm(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    if x.shape().len() != 2 || state.gamma.len() != d {
        return Err(shape_err("batchnorm", x.shape(), &[state.gamma.len()]));
    }
    let mut out = match mode {
        Mode::Train => {
            let (xhat, _, stats) = bn_train_forward(x.data(), n, d)?;
            state.absorb(&stats);
            xhat
        }
        Mode::Eval => {
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(d) {
                for j in 0..d {
                    row[j] = (row[j] - state.running_mean[j]) / (state.running_var[j] + BN_EPS).sqrt();
                }
            }
            out
        }
    };
    for row in out.chunks_exact_mut(d) {
        for j in 0..d {
            row[j] = row[j] * state.gamma[j] + state.beta[j];
        }
    }
    Tensor::checked(vec![n, d], out, "batchnorm")
}

/// Per-row pieces of the weighted contrastive log-ratio
/// `log Σ_c mask_c e^{s_c} − log Σ_c w_c e^{s_c}` with `s = logit / τ`.
pub(crate) struct RatioRow {
    pub loss: f64,
    /// `num / den`, the positive mass of the row.
    pub mass: f64,
}

/// Evaluates one row and, when `grad` is given, writes `∂loss/∂logit`.
pub(crate) fn weighted_log_ratio(
    logits: &[f64],
    num_w: &[f64],
    den_mask: &[f64],
    inv_tau: f64,
    grad: Option<&mut [f64]>,
) -> RatioRow {
    let mut mx = f64::NEG_INFINITY;
    for c in 0..logits.len() {
        if den_mask[c] > 0.0 || num_w[c] > 0.0 {
            mx = mx.max(logits[c] * inv_tau);
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..logits.len() {
        if den_mask[c] > 0.0 || num_w[c] > 0.0 {
            let e = (logits[c] * inv_tau - mx).exp();
            num += num_w[c] * e;
            den += den_mask[c] * e;
        }
    }
    if let Some(g) = grad {
        for c in 0..logits.len() {
            g[c] = if den_mask[c] > 0.0 || num_w[c] > 0.0 {
                let e = (logits[c] * inv_tau - mx).exp();
                (den_mask[c] * e / den - num_w[c] * e / num) * inv_tau
            } else {
                0.0
            };
        }
    }
    RatioRow {
        loss: den.ln() - num.ln(),
        mass: num / den,
    }
}
