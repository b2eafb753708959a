//! Reverse-mode differentiation over a dynamic tape of tensor primitives.
//!
//! Every primitive appends one node. Nodes are only ever appended, so node
//! ids are already a topological order and the backward sweep walks them in
//! reverse, visiting each node once.
//!
//! ```
//! use snclr::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let theta = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(theta, theta).unwrap();
//! let s = tape.sum(sq);
//! let loss = tape.scale(s, 0.5).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(theta).unwrap().data(), &[1.0, -2.0, 3.0]);
//! ```

use super::kernels::{self, gemm, BatchStats, BN_EPS};
use super::Tensor;
use crate::error::{contract, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used as a negative control for
/// gradient checking.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ReluBackward,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sum { x: Var },
    BnTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BnEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    SoftmaxRows { x: Var },
    LogRatio { logits: Var, dlogits: Vec<f64> },
    CrossEntropy { logits: Var, dlogits: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar with respect to the leaves that require them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Smallest `|x|` over the inputs of every rectifier on the tape, or
    /// `None` without rectifiers. Finite differences are only trustworthy
    /// when this exceeds the step's effect on those inputs.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(self.nodes[x.0].value.data()),
                _ => None,
            })
            .flat_map(|d| d.iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let t = Tensor::checked(vec![m, n], out, "matmul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Matmul { a, b, trans_b }, rg))
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "add_bias")?;
        if self.value(b).len() != d {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            row.iter_mut().zip(bias).for_each(|(o, bv)| *o += bv);
        }
        let t = Tensor::checked(self.shape(x).to_vec(), out, "add_bias")?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddBias { x, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::checked(self.shape(a).to_vec(), out, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::checked(self.shape(a).to_vec(), out, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::checked(self.shape(x).to_vec(), out, "scale")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale { x, c }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::from_parts(vec![], vec![self.value(x).sum()]);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum { x }, rg)
    }

    /// Train-mode batch norm. Returns the output and the batch statistics so
    /// the caller can fold them into its running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (n, d) = self.matrix_dims(x, "batchnorm")?;
        self.check_affine(d, gamma, beta)?;
        let (xhat, inv_std, stats) = kernels::bn_train_forward(self.value(x).data(), n, d)?;
        let out = self.affine(&xhat, d, gamma, beta);
        let t = Tensor::checked(vec![n, d], out, "batchnorm")?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "batchnorm")?;
        self.check_affine(d, gamma, beta)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(shape_err("batchnorm", &[d], &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = self.value(x).data().to_vec();
        for row in xhat.chunks_exact_mut(d.max(1)) {
            for j in 0..d {
                row[j] = (row[j] - running_mean[j]) * inv_std[j];
            }
        }
        let out = self.affine(&xhat, d, gamma, beta);
        let t = Tensor::checked(self.shape(x).to_vec(), out, "batchnorm")?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, d: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("batchnorm", &[d], self.shape(gamma)));
        }
        Ok(())
    }

    fn affine(&self, xhat: &[f64], d: usize, gamma: Var, beta: Var) -> Vec<f64> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        out
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "normalize_rows")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(self.value(x).rows());
        for row in out.chunks_exact_mut(d.max(1)) {
            let r = kernels::dot(row, row).sqrt().max(eps);
            norms.push(r);
            row.iter_mut().for_each(|v| *v /= r);
        }
        let t = Tensor::checked(self.shape(x).to_vec(), out, "normalize_rows")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::NormalizeRows { x, norms, eps }, rg))
    }

    /// Row-wise softmax of a matrix (a vector counts as one row).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).cols();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).row_iter() {
            out.extend(kernels::softmax(row));
        }
        let t = Tensor::checked(self.shape(x).to_vec(), out, "softmax")?;
        debug_assert!(d > 0);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SoftmaxRows { x }, rg))
    }

    /// `scale · Σ_rows [log Σ_c mask_c e^{l_c/τ} − log Σ_c w_c e^{l_c/τ}]`.
    ///
    /// `num_w` and `den_mask` are constants shaped like `logits`; every
    /// column with positive numerator weight must also be in the mask.
    pub fn weighted_log_ratio(
        &mut self,
        logits: Var,
        num_w: &Tensor,
        den_mask: &Tensor,
        tau: f64,
        scale: f64,
    ) -> Result<Var> {
        let (n, m) = self.matrix_dims(logits, "weighted_log_ratio")?;
        if num_w.shape() != [n, m] || den_mask.shape() != [n, m] {
            return Err(shape_err("weighted_log_ratio", &[n, m], num_w.shape()));
        }
        if tau <= 0.0 {
            return Err(contract(format!("temperature must be positive, got {tau}")));
        }
        let inv_tau = 1.0 / tau;
        let l = self.value(logits).data();
        let mut dlogits = vec![0.0; n * m];
        let mut total = 0.0;
        for i in 0..n {
            let span = i * m..(i + 1) * m;
            let row = kernels::weighted_log_ratio(
                &l[span.clone()],
                &num_w.data()[span.clone()],
                &den_mask.data()[span.clone()],
                inv_tau,
                Some(&mut dlogits[span]),
            );
            total += row.loss;
        }
        dlogits.iter_mut().for_each(|g| *g *= scale);
        let t = Tensor::checked(vec![], vec![scale * total], "weighted_log_ratio")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::LogRatio { logits, dlogits }, rg))
    }

    /// Mean softmax cross-entropy of `logits: n×c` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != n || labels.iter().any(|&y| y >= c) {
            return Err(contract("cross_entropy labels out of range"));
        }
        let mut dlogits = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &y) in self.value(logits).row_iter().zip(labels) {
            let p = kernels::softmax(row);
            total -= p[y].max(f64::MIN_POSITIVE).ln();
            for (j, pj) in p.iter().enumerate() {
                let target = if j == y { 1.0 } else { 0.0 };
                dlogits.push((pj - target) / n as f64);
            }
        }
        let t = Tensor::checked(vec![], vec![total / n as f64], "cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::CrossEntropy { logits, dlogits }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.cols();
                if self.requires_grad(*a) {
                    // dA = G · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), !trans_b, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let bl = self.value(*b).len();
                    let mut db = vec![0.0; bl];
                    if *trans_b {
                        // dB (n×k) = Gᵀ · A
                        gemm(n, m, k, g, true, self.value(*a).data(), false, &mut db, false);
                    } else {
                        // dB (k×n) = Aᵀ · G
                        gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, false);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias { x, b } => {
                let d = self.value(*b).len();
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks_exact(d.max(1)) {
                        db.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Relu { x } => {
                let slope = if self.fault == Some(Fault::ReluBackward) {
                    0.5
                } else {
                    1.0
                };
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { g * slope } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = (node.value.rows(), node.value.cols());
                self.bn_param_grads(grads, g, xhat, d, *gamma, *beta);
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * hrow[j];
                        }
                    }
                    let nf = n as f64;
                    let mut dx = vec![0.0; n * d];
                    for ((orow, grow), hrow) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                    {
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            orow[j] = inv_std[j] / nf
                                * (nf * dxh - sum_dxhat[j] - hrow[j] * sum_dxhat_xhat[j]);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                self.bn_param_grads(grads, g, xhat, d, *gamma, *beta);
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = g.to_vec();
                    for row in dx.chunks_exact_mut(d) {
                        for j in 0..d {
                            row[j] *= gam[j] * inv_std[j];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                let d = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (i, &r) in norms.iter().enumerate() {
                    let span = i * d..(i + 1) * d;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let out = &mut dx[span];
                    if r > *eps {
                        let proj = kernels::dot(yr, gr);
                        for j in 0..d {
                            out[j] = (gr[j] - yr[j] * proj) / r;
                        }
                    } else {
                        for j in 0..d {
                            out[j] = gr[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows { x } => {
                let d = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((out, yr), gr) in dx
                    .chunks_exact_mut(d)
                    .zip(y.chunks_exact(d))
                    .zip(g.chunks_exact(d))
                {
                    let s = kernels::dot(yr, gr);
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogRatio { logits, dlogits } | Op::CrossEntropy { logits, dlogits } => {
                let up = g[0];
                self.accumulate(grads, *logits, dlogits.iter().map(|v| v * up).collect());
            }
        }
        Ok(())
    }

    fn bn_param_grads(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        xhat: &[f64],
        d: usize,
        gamma: Var,
        beta: Var,
    ) {
        if self.requires_grad(gamma) {
            let mut dg = vec![0.0; d];
            for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for j in 0..d {
                    dg[j] += grow[j] * hrow[j];
                }
            }
            self.accumulate(grads, gamma, dg);
        }
        if self.requires_grad(beta) {
            let mut db = vec![0.0; d];
            for grow in g.chunks_exact(d) {
                db.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
            }
            self.accumulate(grads, beta, db);
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}
