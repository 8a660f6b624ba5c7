//! Two-phase SGD training: fine-tuning, then iterate collection for SWA/SWAG.
//!
//! Both phases use the same SGD-with-momentum update. The second phase runs
//! at the SWAG learning rate and pushes one [`ParamVector`] per epoch to an
//! [`IterateSink`].

use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{Batch, Model, ParamVector};
use crate::rng::{stream_rng, Stream};

/// Loss above which a run is considered diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// Linear from `max_lr` at epoch 0 down to the SWAG rate at `decay_epochs`.
    LinearDecay,
    /// Cosine cycle between `max_lr` and the SWAG rate with period `cycle_length`.
    Cyclical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Finetune,
    Swag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub max_lr: f64,
    /// Defaults to `max_lr / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swag_lr: Option<f64>,
    #[serde(default = "default_cycle_length")]
    pub cycle_length: usize,
    #[serde(default = "default_decay_epochs")]
    pub decay_epochs: usize,
}

fn default_cycle_length() -> usize {
    4
}

fn default_decay_epochs() -> usize {
    20
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            max_lr: 0.05,
            swag_lr: None,
            cycle_length: default_cycle_length(),
            decay_epochs: default_decay_epochs(),
        }
    }
}

impl Schedule {
    pub fn constant(max_lr: f64) -> Self {
        Self {
            max_lr,
            ..Self::default()
        }
    }

    pub fn swag_lr(&self) -> f64 {
        self.swag_lr.unwrap_or(self.max_lr / 2.0)
    }

    /// Rates must be finite and non-negative with `swag_lr <= max_lr`.
    /// A zero rate is accepted so that a run can be pinned at its initial point.
    pub fn validate(&self) -> Result<()> {
        let swag = self.swag_lr();
        if !self.max_lr.is_finite() || self.max_lr < 0.0 || !swag.is_finite() || swag < 0.0 {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if swag > self.max_lr {
            return Err(Error::Config(format!(
                "swag_lr {swag} exceeds max_lr {}",
                self.max_lr
            )));
        }
        if self.kind == ScheduleKind::Cyclical && self.cycle_length == 0 {
            return Err(Error::Config("cycle_length must be positive".into()));
        }
        if self.kind == ScheduleKind::LinearDecay && self.decay_epochs == 0 {
            return Err(Error::Config("decay_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for `epoch`, counted from the start of `phase`.
    pub fn lr_at(&self, phase: Phase, epoch: usize) -> f64 {
        let swag = self.swag_lr();
        match (self.kind, phase) {
            (ScheduleKind::Cyclical, _) => {
                let t = (epoch % self.cycle_length) as f64 / self.cycle_length as f64;
                swag + (self.max_lr - swag) * 0.5 * (1.0 + (2.0 * PI * t).cos())
            }
            (ScheduleKind::Constant, Phase::Finetune) => self.max_lr,
            (ScheduleKind::LinearDecay, Phase::Finetune) => {
                let frac = (epoch as f64 / self.decay_epochs as f64).min(1.0);
                self.max_lr + (swag - self.max_lr) * frac
            }
            (_, Phase::Swag) => swag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub finetune_epochs: usize,
    /// Number of iterates collected, one per epoch.
    pub swag_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            finetune_epochs: 20,
            swag_epochs: 30,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.swag_epochs < 2 {
            return Err(Error::Config("swag_epochs must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Receives one parameter snapshot per collection epoch.
pub trait IterateSink {
    fn push(&mut self, epoch: usize, params: &ParamVector) -> Result<()>;
}

impl IterateSink for Vec<ParamVector> {
    fn push(&mut self, _epoch: usize, params: &ParamVector) -> Result<()> {
        Vec::push(self, params.clone());
        Ok(())
    }
}

impl<S: IterateSink + ?Sized> IterateSink for &mut S {
    fn push(&mut self, epoch: usize, params: &ParamVector) -> Result<()> {
        (**self).push(epoch, params)
    }
}

/// Forwards every iterate to two sinks.
pub struct Tee<A, B>(pub A, pub B);

impl<A: IterateSink, B: IterateSink> IterateSink for Tee<A, B> {
    fn push(&mut self, epoch: usize, params: &ParamVector) -> Result<()> {
        self.0.push(epoch, params)?;
        self.1.push(epoch, params)
    }
}

/// Writes each iterate to `<dir>/iterate_<nnnn>.json`.
pub struct DiskSink {
    dir: PathBuf,
    written: usize,
}

impl DiskSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, written: 0 })
    }

    pub fn written(&self) -> usize {
        self.written
    }
}

impl IterateSink for DiskSink {
    fn push(&mut self, _epoch: usize, params: &ParamVector) -> Result<()> {
        let path = self.dir.join(format!("iterate_{:04}.json", self.written));
        fs::write(path, serde_json::to_vec(params)?)?;
        self.written += 1;
        Ok(())
    }
}

/// A training run that can be advanced one phase at a time, so the
/// fine-tuned model can be read off before iterate collection begins.
pub struct SgdRun<'a> {
    model: Model,
    data: &'a Dataset,
    plan: TrainPlan,
    schedule: Schedule,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    velocity: Vec<f64>,
    epochs_done: usize,
    losses: Vec<f64>,
}

impl<'a> SgdRun<'a> {
    pub fn new(model: Model, data: &'a Dataset, plan: TrainPlan, schedule: Schedule) -> Result<Self> {
        plan.validate()?;
        schedule.validate()?;
        if data.is_empty() {
            return Err(Error::Argument("training data is empty".into()));
        }
        if data.dim() != model.config().input_dim {
            return Err(Error::shape("training features", model.config().input_dim, data.dim()));
        }
        let velocity = vec![0.0; model.param_len()];
        Ok(Self {
            shuffle_rng: stream_rng(plan.seed, Stream::Shuffle),
            dropout_rng: stream_rng(plan.seed, Stream::Dropout),
            model,
            data,
            plan,
            schedule,
            velocity,
            epochs_done: 0,
            losses: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Mean mini-batch loss of every completed epoch.
    pub fn loss_history(&self) -> &[f64] {
        &self.losses
    }

    fn epoch(&mut self, lr: f64) -> Result<()> {
        let n = self.data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut params = self.model.get_params();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.plan.batch_size) {
            let x = self.data.features().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| self.data.labels()[i]).collect();
            let batch = Batch::new(x.view(), &y)?;
            let (loss, grads) = match self.model.loss_and_grads_dropout(&batch, &mut self.dropout_rng) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => {
                    return Err(Error::Diverged {
                        epoch: self.epochs_done,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    epoch: self.epochs_done,
                    loss,
                });
            }
            let (mu, wd) = (self.plan.momentum, self.plan.weight_decay);
            for ((w, v), g) in params.0.iter_mut().zip(&mut self.velocity).zip(&grads.0) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
            if params.0.iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged {
                    epoch: self.epochs_done,
                    loss,
                });
            }
            self.model.set_params(&params)?;
            total += loss;
            batches += 1;
        }
        self.losses.push(total / batches as f64);
        self.epochs_done += 1;
        Ok(())
    }

    pub fn run_finetune(&mut self) -> Result<()> {
        for e in 0..self.plan.finetune_epochs {
            let lr = self.schedule.lr_at(Phase::Finetune, e);
            self.epoch(lr)?;
        }
        Ok(())
    }

    /// Runs the collection phase, pushing the parameters after each epoch.
    pub fn run_swag(&mut self, sink: &mut dyn IterateSink) -> Result<()> {
        for e in 0..self.plan.swag_epochs {
            let lr = self.schedule.lr_at(Phase::Swag, e);
            self.epoch(lr)?;
            sink.push(e, &self.model.get_params())?;
        }
        Ok(())
    }
}

/// Fine-tuning only; returns the MAP model.
pub fn finetune(model: Model, data: &Dataset, plan: &TrainPlan, schedule: &Schedule) -> Result<Model> {
    let mut run = SgdRun::new(model, data, plan.clone(), schedule.clone())?;
    run.run_finetune()?;
    Ok(run.into_model())
}

/// Fine-tuning followed by `swag_epochs` collection epochs.
pub fn train(
    model: Model,
    data: &Dataset,
    plan: &TrainPlan,
    schedule: &Schedule,
    sink: &mut dyn IterateSink,
) -> Result<Model> {
    let mut run = SgdRun::new(model, data, plan.clone(), schedule.clone())?;
    run.run_finetune()?;
    run.run_swag(sink)?;
    Ok(run.into_model())
}
