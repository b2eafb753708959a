//! Online and momentum network stacks.
//!
//! The online branch is `encoder → projector → predictor`; the momentum
//! branch is a copy of `encoder → projector` that only ever changes through
//! [`ModelState::ema_update`]. Encoder layers are `x·W + b` with a rectifier
//! between layers (none after the last). Projector and predictor share one
//! head shape: linear → batch norm → rectifier → linear.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Error, Result};
use crate::numerics::{absorb_stats, BatchStats, Mode, Tape, Tensor, Var};
use crate::rng::rng_for;

pub const DEFAULT_EMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub input_dim: usize,
    pub encoder_hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub projector_hidden_dim: usize,
    /// Width of projections, and therefore of neighbor-store entries.
    pub projection_dim: usize,
    pub predictor_hidden_dim: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            encoder_hidden_dims: vec![128, 128],
            feature_dim: 64,
            projector_hidden_dim: 128,
            projection_dim: 32,
            predictor_hidden_dim: 128,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("projector_hidden_dim", self.projector_hidden_dim),
            ("projection_dim", self.projection_dim),
            ("predictor_hidden_dim", self.predictor_hidden_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.encoder_hidden_dims.contains(&0) {
            return Err(Error::Config(
                "model.encoder_hidden_dims entries must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.encoder_hidden_dims);
        dims.push(self.feature_dim);
        dims
    }
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), both keyed in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| contract(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| contract(format!("missing buffer {name}")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamSet {
        let keep = |k: &String| prefixes.iter().any(|p| k.starts_with(p));
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Order-sensitive digest of every value, for cheap equality checks.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::io::Fnv64::new();
        for (k, v) in self.params.iter().chain(&self.buffers) {
            h.write(k.as_bytes());
            for x in v.data() {
                h.write(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Folds recorded batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            let mean_key = format!("{}.running_mean", u.layer);
            let var_key = format!("{}.running_var", u.layer);
            let mut mean = self.buffer(&mean_key)?.clone();
            let mut var = self.buffer(&var_key)?.clone();
            absorb_stats(mean.data_mut(), var.data_mut(), &u.stats);
            self.buffers.insert(mean_key, mean);
            self.buffers.insert(var_key, var);
        }
        Ok(())
    }
}

/// Batch statistics observed by one train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: String,
    pub stats: BatchStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: StackConfig,
    /// encoder + projector + predictor
    pub online: ParamSet,
    /// encoder + projector
    pub momentum: ParamSet,
    pub ema_coeff: f64,
}

const MOMENTUM_PREFIXES: [&str; 2] = ["encoder.", "projector."];

/// Fan-in-scaled uniform initialization; the momentum branch starts as an
/// exact copy of the online encoder and projector.
pub fn init_model(cfg: &StackConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[0x1417]);
    let mut online = ParamSet::default();
    let mut linear = |ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        ps.params.insert(
            format!("{name}.weight"),
            Tensor::from_parts(vec![fan_in, fan_out], w),
        );
        ps.params
            .insert(format!("{name}.bias"), Tensor::from_parts(vec![fan_out], b));
    };
    let dims = cfg.encoder_dims();
    for (i, pair) in dims.windows(2).enumerate() {
        linear(&mut online, &format!("encoder.{i}"), pair[0], pair[1]);
    }
    let heads = [
        ("projector", cfg.feature_dim, cfg.projector_hidden_dim, cfg.projection_dim),
        ("predictor", cfg.projection_dim, cfg.predictor_hidden_dim, cfg.projection_dim),
    ];
    for (head, din, hidden, dout) in heads {
        linear(&mut online, &format!("{head}.fc1"), din, hidden);
        linear(&mut online, &format!("{head}.fc2"), hidden, dout);
        online
            .params
            .insert(format!("{head}.bn.gamma"), Tensor::full(&[hidden], 1.0));
        online
            .params
            .insert(format!("{head}.bn.beta"), Tensor::zeros(&[hidden]));
        online
            .buffers
            .insert(format!("{head}.bn.running_mean"), Tensor::zeros(&[hidden]));
        online
            .buffers
            .insert(format!("{head}.bn.running_var"), Tensor::full(&[hidden], 1.0));
    }
    let momentum = online.subset(&MOMENTUM_PREFIXES);
    Ok(ModelState {
        config: cfg.clone(),
        online,
        momentum,
        ema_coeff: DEFAULT_EMA,
    })
}

impl ModelState {
    pub fn with_ema(mut self, ema_coeff: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_coeff) {
            return Err(Error::Config(format!(
                "ema_coeff must lie in [0, 1), got {ema_coeff}"
            )));
        }
        self.ema_coeff = ema_coeff;
        Ok(self)
    }

    /// `p_m ← c·p_m + (1−c)·p_o` for every momentum tensor, buffers included.
    pub fn ema_update(&mut self) -> Result<()> {
        let c = self.ema_coeff;
        if !(0.0..1.0).contains(&c) {
            return Err(contract(format!("ema_coeff {c} outside [0, 1)")));
        }
        let pairs = [
            (&mut self.momentum.params, &self.online.params),
            (&mut self.momentum.buffers, &self.online.buffers),
        ];
        for (mom, onl) in pairs {
            for (name, pm) in mom.iter_mut() {
                let po = onl
                    .get(name)
                    .ok_or_else(|| contract(format!("online branch lacks {name}")))?;
                if po.shape() != pm.shape() {
                    return Err(shape_err("ema_update", pm.shape(), po.shape()));
                }
                for (m, o) in pm.data_mut().iter_mut().zip(po.data()) {
                    *m = c * *m + (1.0 - c) * o;
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`ModelState::ema_update`].
pub fn ema_update(state: &mut ModelState) -> Result<()> {
    state.ema_update()
}

/// Parameters of one [`ParamSet`] placed on a tape.
pub struct Bound<'p> {
    vars: BTreeMap<&'p str, Var>,
    set: &'p ParamSet,
}

impl<'p> Bound<'p> {
    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn new(tape: &mut Tape, set: &'p ParamSet, trainable: bool) -> Self {
        let vars = set
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.as_str(), var)
            })
            .collect();
        Self { vars, set }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }

    pub fn set(&self) -> &'p ParamSet {
        self.set
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    fn encoder_depth(&self) -> usize {
        (0..)
            .take_while(|i| self.vars.contains_key(format!("encoder.{i}.weight").as_str()))
            .count()
    }

    /// Encoder features for a batch `x: n × input_dim`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let depth = self.encoder_depth();
        if depth == 0 {
            return Err(contract("parameter set has no encoder"));
        }
        let mut h = x;
        for i in 0..depth {
            h = self.linear(tape, &format!("encoder.{i}"), h)?;
            if i + 1 < depth {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// linear → batch norm → rectifier → linear
    pub fn head(
        &self,
        tape: &mut Tape,
        head: &str,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let h = self.linear(tape, &format!("{head}.fc1"), x)?;
        let gamma = self.var(&format!("{head}.bn.gamma"))?;
        let beta = self.var(&format!("{head}.bn.beta"))?;
        let h = match mode {
            Mode::Train => {
                let (h, stats) = tape.batchnorm_train(h, gamma, beta)?;
                updates.push(BnUpdate {
                    layer: format!("{head}.bn"),
                    stats,
                });
                h
            }
            Mode::Eval => {
                let mean = self.set.buffer(&format!("{head}.bn.running_mean"))?;
                let var = self.set.buffer(&format!("{head}.bn.running_var"))?;
                tape.batchnorm_eval(h, gamma, beta, mean.data(), var.data())?
            }
        };
        let h = tape.relu(h);
        self.linear(tape, &format!("{head}.fc2"), h)
    }

    /// Encoder then projector; returns `(feature, projection)`.
    pub fn encode_project(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, Var)> {
        let f = self.encode(tape, x)?;
        let y = self.head(tape, "projector", f, mode, updates)?;
        Ok((f, y))
    }

    pub fn predict(
        &self,
        tape: &mut Tape,
        y: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        self.head(tape, "predictor", y, mode, updates)
    }
}

fn check_width(params: &ParamSet, first_layer: &str, batch: &Tensor) -> Result<()> {
    let w = params.param(first_layer)?;
    if batch.shape().len() != 2 || batch.cols() != w.shape()[0] {
        return Err(shape_err("input width", batch.shape(), w.shape()));
    }
    Ok(())
}

/// Projections `y` (not normalized) for a batch. Train mode uses batch
/// statistics but leaves the running buffers untouched.
pub fn encode_project(params: &ParamSet, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    check_width(params, "encoder.0.weight", batch)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let x = tape.constant(batch.clone());
    let (_, y) = bound.encode_project(&mut tape, x, mode, &mut Vec::new())?;
    Ok(tape.value(y).clone())
}

/// Predictor output `z` for projections `y`.
pub fn predict(params: &ParamSet, y: &Tensor, mode: Mode) -> Result<Tensor> {
    check_width(params, "predictor.fc1.weight", y)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let x = tape.constant(y.clone());
    let z = bound.predict(&mut tape, x, mode, &mut Vec::new())?;
    Ok(tape.value(z).clone())
}

/// Encoder features, the representation the probes evaluate.
pub fn encode(params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    check_width(params, "encoder.0.weight", batch)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, false);
    let x = tape.constant(batch.clone());
    let f = bound.encode(&mut tape, x)?;
    Ok(tape.value(f).clone())
}
