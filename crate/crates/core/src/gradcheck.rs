//! Finite-difference verification of the tape.
//!
//! [`run`] checks each differentiable primitive on a handful of random
//! instances and then the full batch objective of a small online network:
//! every parameter coordinate's analytic derivative is compared with a
//! central difference, `|a − fd| / max(1, |fd|)`.
//!
//! The objective's detached inputs (neighbor search, positiveness weights,
//! masks) are computed once at the unperturbed parameters and then held
//! fixed, which is exactly the function the tape differentiates. Inputs are
//! redrawn until every rectifier input sits well away from its kink, since a
//! central difference straddling a kink measures the average of two slopes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{encode_project, init_model, Bound, ParamSet, StackConfig};
use crate::neighbor_store::NeighborStore;
use crate::numerics::{Fault, Mode, Tape, Tensor, Var};
use crate::objective::{apply_context, prepare_context, LossConfig, LossContext, NeighborMode, ViewValues};
use crate::rng::rng_for;

/// Rectifier inputs closer to zero than this trigger a redraw.
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 64;
const OP_INSTANCES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSizes {
    pub batch: usize,
    pub k: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub store_fill: usize,
    pub temperature: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        Self {
            batch: 8,
            k: 4,
            input_dim: 8,
            hidden_dim: 16,
            feature_dim: 12,
            projection_dim: 8,
            store_fill: 40,
            temperature: 0.1,
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

impl GradcheckSizes {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            input_dim: self.input_dim,
            encoder_hidden_dims: vec![self.hidden_dim],
            feature_dim: self.feature_dim,
            projector_hidden_dim: self.hidden_dim,
            projection_dim: self.projection_dim,
            predictor_hidden_dim: self.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Location of the worst coordinate, e.g. `encoder.0.weight[17]`.
    pub worst_coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub num_params: usize,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> &CheckResult {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one check")
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().max_rel_error
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error <= self.tolerance)
    }
}

/// Running maximum of the relative error over coordinates.
struct Worst {
    result: CheckResult,
}

impl Worst {
    fn new(name: &str) -> Self {
        Self {
            result: CheckResult {
                name: name.to_string(),
                coordinates: 0,
                max_rel_error: 0.0,
                worst_coordinate: String::new(),
                analytic: 0.0,
                numeric: 0.0,
            },
        }
    }

    fn observe(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.result.coordinates += 1;
        if err > self.result.max_rel_error || self.result.worst_coordinate.is_empty() {
            self.result.max_rel_error = err;
            self.result.worst_coordinate = at();
            self.result.analytic = analytic;
            self.result.numeric = numeric;
        }
    }

    fn merge(&mut self, other: Worst) {
        self.result.coordinates += other.result.coordinates;
        if other.result.max_rel_error > self.result.max_rel_error || self.result.worst_coordinate.is_empty() {
            let n = self.result.coordinates;
            self.result = CheckResult {
                name: self.result.name.clone(),
                coordinates: n,
                ..other.result
            };
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn tape_with(fault: Option<Fault>) -> Tape {
    let mut t = Tape::new();
    if let Some(f) = fault {
        t.inject_fault(f);
    }
    t
}

type UnaryOp = dyn Fn(&mut Tape, Var) -> Result<Var>;

/// `x ↦ Σ probe ⊙ op(x)` checked at `x0`.
fn check_op(name: &str, x0: &Tensor, op: &UnaryOp, probe_seed: u64, h: f64, fault: Option<Fault>) -> Result<Worst> {
    let out_shape = {
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let y = op(&mut t, x)?;
        t.value(y).shape().to_vec()
    };
    let probe = random(&mut rng_for(probe_seed, &[]), &out_shape, -1.0, 1.0);
    let eval = |x: &Tensor, tape: &mut Tape| -> Result<(Var, Var)> {
        let xv = tape.param(x.clone());
        let y = op(tape, xv)?;
        let w = tape.constant(probe.clone());
        let p = tape.mul(y, w)?;
        Ok((xv, tape.sum(p)))
    };
    let mut tape = tape_with(fault);
    let (xv, loss) = eval(x0, &mut tape)?;
    let analytic = tape.backward(loss)?.get_or_zeros(xv, x0);
    let value = |x: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let (_, l) = eval(x, &mut t)?;
        t.value(l).item()
    };
    let mut worst = Worst::new(name);
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let fd = (value(&plus)? - value(&minus)?) / (2.0 * h);
        worst.observe(|| format!("{name}[{i}]"), analytic.data()[i], fd);
    }
    Ok(worst)
}

fn op_suite(seed: u64, sizes: &GradcheckSizes, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let h = sizes.step;
    let num_w = Tensor::from_rows(&[[1.0, 0.6, 0.0, 0.0, 0.0], [0.0, 1.0, 0.3, 0.0, 0.0]])?;
    let den = Tensor::from_rows(&[[1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 0.0, 1.0]])?;
    let gamma = Tensor::vector(vec![1.3, 0.8, -0.5, 1.0])?;
    let beta = Tensor::vector(vec![0.2, -0.1, 0.0, 0.4])?;
    let w = Tensor::from_rows(&[[0.4, -0.3], [0.2, 0.8], [-0.6, 0.1], [0.5, 0.5]])?;
    let tau = sizes.temperature;
    let g2 = gamma.clone();
    let b2 = beta.clone();
    let ops: Vec<(&str, Vec<usize>, Box<UnaryOp>)> = vec![
        ("matmul", vec![3, 4], Box::new(move |t, x| {
            let c = t.constant(w.clone());
            t.matmul(x, c)
        })),
        ("normalize_rows", vec![3, 5], Box::new(|t, x| t.normalize_rows(x, 1e-12))),
        ("softmax_rows", vec![2, 6], Box::new(|t, x| t.softmax_rows(x))),
        ("batchnorm_train", vec![6, 4], Box::new(move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            Ok(t.batchnorm_train(x, g, b)?.0)
        })),
        ("batchnorm_eval", vec![3, 4], Box::new(move |t, x| {
            let g = t.constant(g2.clone());
            let b = t.constant(b2.clone());
            t.batchnorm_eval(x, g, b, &[0.1, -0.2, 0.0, 0.3], &[0.5, 2.0, 1.0, 0.8])
        })),
        ("weighted_log_ratio", vec![2, 5], Box::new(move |t, x| t.weighted_log_ratio(x, &num_w, &den, tau, 0.5))),
        ("cross_entropy", vec![3, 4], Box::new(|t, x| t.cross_entropy(x, &[0, 3, 1]))),
        ("relu", vec![4, 4], Box::new(|t, x| Ok(t.relu(x)))),
    ];
    let mut out = Vec::with_capacity(ops.len());
    for (oi, (name, shape, op)) in ops.iter().enumerate() {
        let mut total = Worst::new(name);
        for inst in 0..OP_INSTANCES {
            let mut rng = rng_for(seed, &[0x0B5, oi as u64, inst as u64]);
            let mut x0 = random(&mut rng, shape, -1.0, 1.0);
            // keep rectifier inputs off the kink
            for v in x0.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1_f64.copysign(*v);
                }
            }
            let probe_seed = crate::rng::derive_seed(seed, &[0x9B0, oi as u64, inst as u64]);
            total.merge(check_op(name, &x0, op.as_ref(), probe_seed, h, fault)?);
        }
        out.push(total.result);
    }
    Ok(out)
}

/// Online forward of both views through to the objective under a fixed
/// context. Returns the tape, the loss, and the parameter leaves.
fn objective_tape(
    params: &ParamSet,
    x: &[Tensor; 2],
    ctx: Option<&LossContext>,
    fault: Option<Fault>,
) -> Result<(Tape, Option<Var>, Vec<(String, Var)>, [Tensor; 2])> {
    let mut tape = tape_with(fault);
    let bound = Bound::new(&mut tape, params, true);
    let mut z = Vec::with_capacity(2);
    let mut y = Vec::with_capacity(2);
    let mut updates = Vec::new();
    for xv in x {
        let input = tape.constant(xv.clone());
        let (_, yv) = bound.encode_project(&mut tape, input, Mode::Train, &mut updates)?;
        z.push(bound.predict(&mut tape, yv, Mode::Train, &mut updates)?);
        y.push(tape.value(yv).clone());
    }
    let vars: Vec<(String, Var)> = bound.vars().map(|(k, v)| (k.to_string(), v)).collect();
    let loss = match ctx {
        Some(c) => Some(apply_context(&mut tape, [z[0], z[1]], c)?.0),
        None => None,
    };
    let [y0, y1]: [Tensor; 2] = y.try_into().expect("two views");
    Ok((tape, loss, vars, [y0, y1]))
}

fn objective_check(seed: u64, sizes: &GradcheckSizes, fault: Option<Fault>) -> Result<(CheckResult, usize)> {
    if sizes.batch < 2 {
        return Err(contract("gradcheck batch must be at least 2"));
    }
    let stack = sizes.stack();
    let model = init_model(&stack, crate::rng::derive_seed(seed, &[0x90D]))?;
    let mut rng = rng_for(seed, &[0x5E7]);
    let mut store = NeighborStore::new(sizes.store_fill.max(1), sizes.projection_dim)?;
    store.push_batch(&random(&mut rng, &[sizes.store_fill, sizes.projection_dim], -1.0, 1.0))?;

    let mut x = None;
    for _ in 0..MAX_REDRAWS {
        let cand = [
            random(&mut rng, &[sizes.batch, sizes.input_dim], -1.5, 1.5),
            random(&mut rng, &[sizes.batch, sizes.input_dim], -1.5, 1.5),
        ];
        let (tape, _, _, _) = objective_tape(&model.online, &cand, None, None)?;
        if tape.relu_margin().is_none_or(|m| m >= KINK_MARGIN) {
            x = Some(cand);
            break;
        }
    }
    let x = x.ok_or_else(|| contract("could not draw inputs away from rectifier kinks"))?;

    let (_, _, _, online_y) = objective_tape(&model.online, &x, None, None)?;
    let [y0, y1] = online_y;
    let views = [
        ViewValues {
            online_projection: y0,
            momentum_projection: encode_project(&model.momentum, &x[0], Mode::Eval)?,
        },
        ViewValues {
            online_projection: y1,
            momentum_projection: encode_project(&model.momentum, &x[1], Mode::Eval)?,
        },
    ];
    let cfg = LossConfig {
        temperature: sizes.temperature,
        k: sizes.k,
        neighbor_mode: NeighborMode::Both,
        warmup_epochs: Some(0),
    };
    let ctx = prepare_context(&views, &store, &cfg, 0)?;

    let (tape, loss, vars, _) = objective_tape(&model.online, &x, Some(&ctx), fault)?;
    let grads = tape.backward(loss.expect("context given"))?;
    let value = |ps: &ParamSet| -> Result<f64> {
        let (t, l, _, _) = objective_tape(ps, &x, Some(&ctx), None)?;
        t.value(l.expect("context given")).item()
    };
    let h = sizes.step;
    let mut worst = Worst::new("batch_loss");
    let mut params = model.online.clone();
    for (name, var) in &vars {
        let base = model.online.params[name].clone();
        let analytic = grads.get_or_zeros(*var, &base);
        for i in 0..base.len() {
            let orig = base.data()[i];
            params.params.get_mut(name).expect("known").data_mut()[i] = orig + h;
            let up = value(&params)?;
            params.params.get_mut(name).expect("known").data_mut()[i] = orig - h;
            let down = value(&params)?;
            params.params.get_mut(name).expect("known").data_mut()[i] = orig;
            worst.observe(|| format!("{name}[{i}]"), analytic.data()[i], (up - down) / (2.0 * h));
        }
    }
    Ok((worst.result, model.online.num_params()))
}

/// Primitive suite plus the full objective for one seed.
pub fn run(seed: u64, sizes: &GradcheckSizes) -> Result<GradcheckReport> {
    run_with_fault(seed, sizes, None)
}

/// [`run`] with a corrupted backward rule on every analytic tape.
#[doc(hidden)]
pub fn run_with_fault(seed: u64, sizes: &GradcheckSizes, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut checks = op_suite(seed, sizes, fault)?;
    let (objective, num_params) = objective_check(seed, sizes, fault)?;
    checks.push(objective);
    Ok(GradcheckReport {
        seed,
        tolerance: sizes.tolerance,
        num_params,
        checks,
    })
}
