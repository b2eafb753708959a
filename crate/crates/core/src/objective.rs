//! Vanilla and soft-neighbor contrastive losses.
//!
//! Both losses reduce to one kernel: for an anchor row of logits `l_c`
//! (cosine similarities) the loss is
//! `log Σ_{c ∈ den} e^{l_c/τ} − log Σ_c w_c e^{l_c/τ}`. The vanilla loss
//! puts weight 1 on the anchor's own second view; the soft-neighbor loss
//! adds the anchor's retrieved neighbors to the numerator with their
//! positiveness weights and every other sample's neighbors to the
//! denominator. All similarities use unit-normalized vectors on both sides.
//!
//! [`batch_loss`] is split in two stages so the stop-gradient contract is
//! explicit: [`prepare_context`] performs every detached computation
//! (neighbor search, positiveness, masks) on plain values, and
//! [`apply_context`] records only the differentiable part on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Error, Result};
use crate::neighbor_store::NeighborStore;
use crate::numerics::{l2_normalize, normalize_rows_in_place, weighted_log_ratio, Tape, Tensor, Var};
use crate::positiveness::positiveness;

const NORM_EPS: f64 = 1e-12;

/// Which sides of the loss receive retrieved neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    None,
    PositiveOnly,
    NegativeOnly,
    Both,
}

impl NeighborMode {
    pub fn positive_side(self) -> bool {
        matches!(self, Self::PositiveOnly | Self::Both)
    }

    pub fn negative_side(self) -> bool {
        matches!(self, Self::NegativeOnly | Self::Both)
    }
}

impl std::str::FromStr for NeighborMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "positive_only" => Ok(Self::PositiveOnly),
            "negative_only" => Ok(Self::NegativeOnly),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown neighbor mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Neighbors retrieved per query.
    pub k: usize,
    pub neighbor_mode: NeighborMode,
    /// Epochs at the start of training that use the vanilla loss. Unset
    /// means a tenth of the run; see [`LossConfig::resolve`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            k: 5,
            neighbor_mode: NeighborMode::Both,
            warmup_epochs: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Fills an unset warm-up length with `total_epochs / 10`.
    pub fn resolve(&self, total_epochs: usize) -> LossConfig {
        LossConfig {
            warmup_epochs: Some(self.warmup_epochs.unwrap_or(total_epochs / 10)),
            ..self.clone()
        }
    }

    /// Whether epoch `epoch` (0-based) uses neighbors at all. An unset
    /// warm-up counts as zero here.
    pub fn uses_neighbors(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs.unwrap_or(0)
            && self.neighbor_mode != NeighborMode::None
            && self.k > 0
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(contract(format!("temperature must be positive, got {tau}")))
    }
}

/// Scores `anchor` against `columns` and evaluates the weighted log-ratio.
fn cosine_row_loss(
    anchor: &[f64],
    columns: &[&[f64]],
    num_w: &[f64],
    den_mask: &[f64],
    tau: f64,
) -> Result<f64> {
    let a = l2_normalize(anchor, NORM_EPS);
    let mut logits = Vec::with_capacity(columns.len());
    for c in columns {
        if c.len() != a.len() {
            return Err(shape_err("contrastive loss", &[a.len()], &[c.len()]));
        }
        logits.push(crate::numerics::dot(&a, &l2_normalize(c, NORM_EPS)));
    }
    Ok(weighted_log_ratio(&logits, num_w, den_mask, 1.0 / tau, None).loss)
}

/// Vanilla contrastive loss of one anchor against its positive and the
/// other `N − 1` samples of the batch.
pub fn clr_loss<R: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[R],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(contract("vanilla loss needs at least one negative (N ≥ 2)"));
    }
    let mut columns: Vec<&[f64]> = vec![positive];
    columns.extend(negatives.iter().map(|r| r.as_ref()));
    let mut num_w = vec![0.0; columns.len()];
    num_w[0] = 1.0;
    let den = vec![1.0; columns.len()];
    cosine_row_loss(anchor, &columns, &num_w, &den, tau)
}

/// Inputs of the soft-neighbor loss for one anchor.
#[derive(Clone, Debug)]
pub struct SnclrInputs<'a> {
    /// Predictor output of the anchor's first view.
    pub z1: &'a [f64],
    /// Momentum projection of the anchor's second view.
    pub y2: &'a [f64],
    /// Neighbors of `y2` (`K` rows).
    pub pos_neighbors: &'a [Vec<f64>],
    /// Positiveness weights `w_1..w_K`; `w_0 = 1` is implicit.
    pub weights: &'a [f64],
    /// Momentum projections of the other `N − 1` samples.
    pub negatives: &'a [Vec<f64>],
    /// Neighbors of each negative (`N − 1` lists).
    pub neg_neighbors: &'a [Vec<Vec<f64>>],
}

/// Soft-neighbor contrastive loss of one anchor, including the `1/N`
/// factor, so that summing it over the `N` anchors of a batch gives the
/// batch mean of the log-ratio.
pub fn snclr_loss(inp: &SnclrInputs<'_>, tau: f64, n: usize, mode: NeighborMode) -> Result<f64> {
    check_tau(tau)?;
    if n < 2 || inp.negatives.len() != n - 1 {
        return Err(contract(format!(
            "batch size {n} needs {} negatives, got {}",
            n.saturating_sub(1),
            inp.negatives.len()
        )));
    }
    if inp.weights.len() != inp.pos_neighbors.len() {
        return Err(contract(format!(
            "{} positiveness weights for {} neighbors",
            inp.weights.len(),
            inp.pos_neighbors.len()
        )));
    }
    if mode.negative_side() && inp.neg_neighbors.len() != inp.negatives.len() {
        return Err(contract(format!(
            "{} neighbor lists for {} negatives",
            inp.neg_neighbors.len(),
            inp.negatives.len()
        )));
    }
    let mut columns: Vec<&[f64]> = vec![inp.y2];
    let mut num_w = vec![1.0];
    if mode.positive_side() {
        for (nb, &w) in inp.pos_neighbors.iter().zip(inp.weights) {
            columns.push(nb);
            num_w.push(w);
        }
    }
    for (i, neg) in inp.negatives.iter().enumerate() {
        columns.push(neg);
        num_w.push(0.0);
        if mode.negative_side() {
            for nb in &inp.neg_neighbors[i] {
                columns.push(nb);
                num_w.push(0.0);
            }
        }
    }
    let den = vec![1.0; columns.len()];
    Ok(cosine_row_loss(inp.z1, &columns, &num_w, &den, tau)? / n as f64)
}

/// Negative terms per anchor: each other sample plus, when the negative
/// side uses neighbors, its `k_effective` neighbors.
pub fn negative_term_count(n: usize, k_effective: usize, mode: NeighborMode) -> usize {
    let per = if mode.negative_side() { k_effective + 1 } else { 1 };
    n.saturating_sub(1) * per
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub loss: f64,
    /// Per anchor `Σ num / Σ den`, averaged over both view orderings.
    pub positive_mass: Vec<f64>,
    /// Negative terms per anchor.
    pub negative_terms: usize,
    pub k_effective: usize,
    pub used_neighbors: bool,
}

/// Detached values one view contributes to the loss.
#[derive(Clone, Debug)]
pub struct ViewValues {
    /// Online projection `y`, used only for positiveness.
    pub online_projection: Tensor,
    /// Momentum projection, the contrastive target.
    pub momentum_projection: Tensor,
}

#[derive(Clone, Debug)]
struct OrderingContext {
    anchor_view: usize,
    /// Unit-norm columns, `M × d`.
    targets: Tensor,
    num_w: Tensor,
    den_mask: Tensor,
}

/// Everything the differentiable stage needs, computed without a tape.
#[derive(Clone, Debug)]
pub struct LossContext {
    orderings: Vec<OrderingContext>,
    tau: f64,
    n: usize,
    pub k_effective: usize,
    pub used_neighbors: bool,
    pub negative_terms: usize,
}

/// Detached half of [`batch_loss`]: neighbor search with the momentum
/// projections as queries, positiveness against the online projections,
/// and the numerator/denominator masks for both view orderings.
pub fn prepare_context(
    views: &[ViewValues; 2],
    store: &NeighborStore,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<LossContext> {
    cfg.validate()?;
    let n = views[0].momentum_projection.rows();
    if n < 2 {
        return Err(contract(format!("batch size must be at least 2, got {n}")));
    }
    for v in views {
        if v.momentum_projection.rows() != n || v.online_projection.rows() != n {
            return Err(shape_err(
                "batch_loss views",
                v.momentum_projection.shape(),
                v.online_projection.shape(),
            ));
        }
    }
    let used_neighbors = cfg.uses_neighbors(epoch);
    let k_eff = if used_neighbors { cfg.k.min(store.fill()) } else { 0 };
    let mode = if used_neighbors {
        cfg.neighbor_mode
    } else {
        NeighborMode::None
    };
    let d = views[0].momentum_projection.cols();
    let mut orderings = Vec::with_capacity(2);
    for anchor_view in 0..2 {
        let target = &views[1 - anchor_view].momentum_projection;
        let hits = if k_eff > 0 {
            store.batched_top_k(target, k_eff)?
        } else {
            vec![Vec::new(); n]
        };
        let m = n * (1 + k_eff);
        let mut targets = target.data().to_vec();
        normalize_rows_in_place(&mut targets, d, NORM_EPS);
        targets.reserve(n * k_eff * d);
        for list in &hits {
            for h in list {
                targets.extend_from_slice(&h.feature);
            }
        }
        let mut num_w = vec![0.0; n * m];
        let mut den = vec![0.0; n * m];
        for i in 0..n {
            let row = i * m;
            num_w[row + i] = 1.0;
            for l in 0..n {
                den[row + l] = 1.0;
            }
            if k_eff == 0 {
                continue;
            }
            if mode.positive_side() {
                let feats: Vec<&[f64]> = hits[i].iter().map(|h| h.feature.as_slice()).collect();
                let w = positiveness(views[anchor_view].online_projection.row(i), &feats);
                for j in 0..k_eff {
                    num_w[row + n + i * k_eff + j] = w.weights[j];
                    den[row + n + i * k_eff + j] = 1.0;
                }
            }
            if mode.negative_side() {
                for l in (0..n).filter(|&l| l != i) {
                    for j in 0..k_eff {
                        den[row + n + l * k_eff + j] = 1.0;
                    }
                }
            }
        }
        orderings.push(OrderingContext {
            anchor_view,
            targets: Tensor::checked(vec![m, d], targets, "prepare_context")?,
            num_w: Tensor::from_parts(vec![n, m], num_w),
            den_mask: Tensor::from_parts(vec![n, m], den),
        });
    }
    Ok(LossContext {
        orderings,
        tau: cfg.temperature,
        n,
        k_effective: k_eff,
        used_neighbors,
        negative_terms: negative_term_count(n, k_eff, mode),
    })
}

/// Differentiable half of [`batch_loss`]. `z[v]` are the predictor outputs
/// of view `v`. Returns the loss node and the per-anchor positive mass.
pub fn apply_context(tape: &mut Tape, z: [Var; 2], ctx: &LossContext) -> Result<(Var, Vec<f64>)> {
    let mut total: Option<Var> = None;
    let mut mass = vec![0.0; ctx.n];
    let scale = 1.0 / (ctx.n as f64 * ctx.orderings.len() as f64);
    for o in &ctx.orderings {
        let zn = tape.normalize_rows(z[o.anchor_view], NORM_EPS)?;
        let t = tape.constant(o.targets.clone());
        let logits = tape.matmul_t(zn, t)?;
        let part = tape.weighted_log_ratio(logits, &o.num_w, &o.den_mask, ctx.tau, scale)?;
        let lv = tape.value(logits);
        for (i, m) in mass.iter_mut().enumerate() {
            let row = weighted_log_ratio(
                lv.row(i),
                o.num_w.row(i),
                o.den_mask.row(i),
                1.0 / ctx.tau,
                None,
            );
            *m += row.mass / ctx.orderings.len() as f64;
        }
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    let total = total.ok_or_else(|| contract("loss context has no orderings"))?;
    Ok((total, mass))
}

/// Symmetrized batch objective.
///
/// During the first `warmup_epochs`, in mode `none`, or when the store is
/// empty, this is the mean vanilla loss over anchors (both orderings).
/// Otherwise it is the sum over anchors of [`snclr_loss`], averaged over
/// the two orderings. The caller pushes to the store after this returns.
pub fn batch_loss(
    tape: &mut Tape,
    z: [Var; 2],
    views: &[ViewValues; 2],
    store: &NeighborStore,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<(Var, LossOutput)> {
    let ctx = prepare_context(views, store, cfg, epoch)?;
    let (loss, positive_mass) = apply_context(tape, z, &ctx)?;
    Ok((
        loss,
        LossOutput {
            loss: tape.value(loss).item()?,
            positive_mass,
            negative_terms: ctx.negative_terms,
            k_effective: ctx.k_effective,
            used_neighbors: ctx.used_neighbors && ctx.k_effective > 0,
        },
    ))
}
