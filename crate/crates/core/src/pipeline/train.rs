//! The pretraining loop.
//!
//! One optimizer step: draw the next batch of the epoch's permutation,
//! build two views per sample, run the momentum branch (eval mode, values
//! only) and the online branch (train mode, on a tape), evaluate the batch
//! loss, back-propagate, take an SGD step on the online parameters, fold
//! the batch-norm statistics into the online buffers, apply one EMA update
//! to the momentum branch, and finally push the momentum projections of the
//! second view into the neighbor store.
//!
//! Every random draw derives from the base seed plus (epoch) for batch
//! order or (step, sample index, view) for augmentation, so a run resumed
//! from a [`TrainState`] replays the uninterrupted run exactly.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, sample_seed, AugmentConfig};
use super::optim::Sgd;
use super::schedule::{lr_at, LrSchedule};
use crate::error::{Error, Result};
use crate::eval_probe::neighbor_purity;
use crate::io::Dataset;
use crate::model::{encode, encode_project, init_model, Bound, ModelState, StackConfig, DEFAULT_EMA};
use crate::neighbor_store::{NeighborStore, StoreSnapshot};
use crate::numerics::{Mode, Tape, Tensor};
use crate::objective::{batch_loss, LossConfig, LossOutput, ViewValues};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Scaled by `batch_size / 256` to give the peak rate.
    pub base_lr: f64,
    pub warmup_lr_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_coeff: f64,
    pub store_capacity: usize,
    pub seed: u64,
    /// Neighbors per sample for the end-of-epoch purity measurement;
    /// 0 disables it.
    pub purity_k: usize,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            base_lr: 1.0,
            warmup_lr_epochs: 5,
            momentum: 0.9,
            weight_decay: 1e-4,
            ema_coeff: DEFAULT_EMA,
            store_capacity: 4096,
            seed: 0,
            purity_k: 10,
            checkpoint_every: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("train.base_lr must be non-negative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.ema_coeff) {
            return bad(format!("train.ema_coeff must lie in [0, 1), got {}", self.ema_coeff));
        }
        if self.store_capacity < self.batch_size {
            return bad(format!(
                "train.store_capacity ({}) must be at least batch_size ({})",
                self.store_capacity, self.batch_size
            ));
        }
        self.loss.validate()
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub store_fill: usize,
    /// Present on the last step of each epoch.
    pub neighbor_purity: Option<f64>,
    pub wall_ms: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub velocity: BTreeMap<String, Tensor>,
    pub store: StoreSnapshot,
    pub step: usize,
}

pub struct Trainer<'d> {
    cfg: TrainConfig,
    augment: AugmentConfig,
    data: &'d Dataset,
    model: ModelState,
    opt: Sgd,
    store: NeighborStore,
    step: usize,
    steps_per_epoch: usize,
    order: Option<(usize, Vec<usize>)>,
    last_loss: Option<LossOutput>,
}

fn check_inputs(
    data: &Dataset,
    model: &StackConfig,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<()> {
    model.validate()?;
    cfg.validate()?;
    aug.validate()?;
    if data.dim() != model.input_dim {
        return Err(Error::Config(format!(
            "dataset dim {} does not match model.input_dim {}",
            data.dim(),
            model.input_dim
        )));
    }
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} samples, fewer than batch_size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if cfg.purity_k > 0 && cfg.purity_k >= data.len() {
        return Err(Error::Config(format!(
            "train.purity_k ({}) must be below the dataset size ({})",
            cfg.purity_k,
            data.len()
        )));
    }
    Ok(())
}

impl<'d> Trainer<'d> {
    pub fn new(
        data: &'d Dataset,
        model_cfg: &StackConfig,
        cfg: &TrainConfig,
        aug: &AugmentConfig,
    ) -> Result<Self> {
        check_inputs(data, model_cfg, cfg, aug)?;
        let model = init_model(model_cfg, cfg.seed)?.with_ema(cfg.ema_coeff)?;
        let store = NeighborStore::new(cfg.store_capacity, model_cfg.projection_dim)?;
        let state = TrainState {
            model,
            velocity: BTreeMap::new(),
            store: store.snapshot(),
            step: 0,
        };
        Self::resume(data, cfg, aug, state)
    }

    /// Continues from `state`; `cfg` and `aug` must be those of the
    /// original run for the replay to match.
    pub fn resume(
        data: &'d Dataset,
        cfg: &TrainConfig,
        aug: &AugmentConfig,
        state: TrainState,
    ) -> Result<Self> {
        check_inputs(data, &state.model.config, cfg, aug)?;
        if state.store.dim != state.model.config.projection_dim {
            return Err(Error::Corrupt(format!(
                "store dim {} does not match projection_dim {}",
                state.store.dim, state.model.config.projection_dim
            )));
        }
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        opt.velocity = state.velocity;
        let mut cfg = cfg.clone();
        cfg.loss = cfg.loss.resolve(cfg.epochs);
        Ok(Self {
            steps_per_epoch: data.len() / cfg.batch_size,
            cfg,
            augment: aug.clone(),
            data,
            model: state.model,
            opt,
            store: NeighborStore::from_snapshot(state.store)?,
            step: state.step,
            order: None,
            last_loss: None,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            model: self.model.clone(),
            velocity: self.opt.velocity.clone(),
            store: self.store.snapshot(),
            step: self.step,
        }
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn store(&self) -> &NeighborStore {
        &self.store
    }

    /// Config with the loss warm-up resolved.
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Loss details of the most recent step.
    pub fn last_loss(&self) -> Option<&LossOutput> {
        self.last_loss.as_ref()
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.cfg.base_lr,
            batch_size: self.cfg.batch_size,
            warmup_steps: self.cfg.warmup_lr_epochs * self.steps_per_epoch,
        }
    }

    fn batch_indices(&mut self, epoch: usize, b: usize) -> Vec<usize> {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.data.len()).collect();
            perm.shuffle(&mut rng_for(self.cfg.seed, &[0xE90C, epoch as u64]));
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().expect("set above").1;
        let n = self.cfg.batch_size;
        perm[b * n..(b + 1) * n].to_vec()
    }

    fn views(&self, idx: &[usize]) -> Result<[Tensor; 2]> {
        let d = self.data.dim();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = idx
            .par_iter()
            .map(|&i| {
                let seed = sample_seed(self.cfg.seed, self.step as u64, i as u64);
                augment(self.data.features.row(i), seed, &self.augment)
            })
            .collect();
        let mut a = Vec::with_capacity(idx.len() * d);
        let mut b = Vec::with_capacity(idx.len() * d);
        for (v1, v2) in pairs {
            a.extend(v1);
            b.extend(v2);
        }
        Ok([
            Tensor::new(&[idx.len(), d], a)?,
            Tensor::new(&[idx.len(), d], b)?,
        ])
    }

    /// Runs one optimizer step. Errors if the run is already complete.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(crate::error::contract("training run already complete"));
        }
        let started = Instant::now();
        let epoch = self.step / self.steps_per_epoch;
        let idx = self.batch_indices(epoch, self.step % self.steps_per_epoch);
        let x = self.views(&idx)?;

        let momentum = [
            encode_project(&self.model.momentum, &x[0], Mode::Eval)?,
            encode_project(&self.model.momentum, &x[1], Mode::Eval)?,
        ];

        let mut tape = Tape::new();
        let mut updates = Vec::new();
        let bound = Bound::new(&mut tape, &self.model.online, true);
        let mut z = Vec::with_capacity(2);
        let mut online = Vec::with_capacity(2);
        for xv in &x {
            let input = tape.constant(xv.clone());
            let (_, y) = bound.encode_project(&mut tape, input, Mode::Train, &mut updates)?;
            z.push(bound.predict(&mut tape, y, Mode::Train, &mut updates)?);
            online.push(tape.value(y).clone());
        }
        let [m0, m1] = momentum;
        let [o0, o1]: [Tensor; 2] = online.try_into().expect("two views");
        let views = [
            ViewValues {
                online_projection: o0,
                momentum_projection: m0,
            },
            ViewValues {
                online_projection: o1,
                momentum_projection: m1,
            },
        ];
        let (loss, out) = batch_loss(
            &mut tape,
            [z[0], z[1]],
            &views,
            &self.store,
            &self.cfg.loss,
            epoch,
        )?;
        let grads = tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = bound
            .vars()
            .map(|(name, v)| {
                let like = &self.model.online.params[name];
                (name.to_string(), grads.get_or_zeros(v, like))
            })
            .collect();

        let lr = lr_at(self.step, self.total_steps(), &self.schedule());
        self.opt.step(&mut self.model.online.params, &grads, lr)?;
        self.model.online.apply_bn_updates(&updates)?;
        self.model.ema_update()?;
        let [_, pushed] = views.map(|v| v.momentum_projection);
        self.store.push_batch(&pushed)?;

        let record_step = self.step;
        self.step += 1;
        let end_of_epoch = self.step.is_multiple_of(self.steps_per_epoch);
        let neighbor_purity = if end_of_epoch && self.cfg.purity_k > 0 {
            Some(self.purity()?)
        } else {
            None
        };
        let record = StepRecord {
            step: record_step,
            epoch,
            loss: out.loss,
            lr,
            store_fill: self.store.fill(),
            neighbor_purity,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.last_loss = Some(out);
        Ok(record)
    }

    /// Purity of the online encoder features over the whole dataset.
    pub fn purity(&self) -> Result<f64> {
        let feats = encode(&self.model.online, &self.data.features)?;
        neighbor_purity(&feats, &self.data.labels, self.cfg.purity_k)
    }

    /// Steps until `until` (capped at the end of the run), handing each
    /// record to `sink`.
    pub fn run_until<F>(&mut self, until: usize, mut sink: F) -> Result<()>
    where
        F: FnMut(&Self, &StepRecord) -> Result<()>,
    {
        let until = until.min(self.total_steps());
        while self.step < until {
            let rec = self.step_once()?;
            sink(self, &rec)?;
        }
        Ok(())
    }
}

pub struct PretrainOutput {
    pub model: ModelState,
    pub store: NeighborStore,
    pub metrics: Vec<StepRecord>,
}

/// Full run from initialization.
pub fn pretrain(
    data: &Dataset,
    model_cfg: &StackConfig,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<PretrainOutput> {
    let mut trainer = Trainer::new(data, model_cfg, cfg, aug)?;
    let mut metrics = Vec::with_capacity(trainer.total_steps());
    trainer.run_until(usize::MAX, |_, r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    Ok(PretrainOutput {
        model: trainer.model,
        store: trainer.store,
        metrics,
    })
}
