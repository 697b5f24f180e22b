//! Training loop: strategy dispatch, gradient-cached steps, AdamW, metrics
//! and checkpoints.

pub mod adamw;
pub mod reference;
pub mod step;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, TrainExample};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{mix64, Model};
use crate::params::ParamHost;
use crate::tensor::Real;

pub use adamw::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
pub use reference::ReferenceScorer;
pub use step::{batch_loss_tape, gradcache_step, naive_step, LossSetup, StepLosses};

pub const OPTIMIZER_FILE: &str = "optimizer.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Cl,
    ClSft,
    ClDpo,
    #[default]
    Grl,
    GrlSft,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Self::Cl, Self::ClSft, Self::ClDpo, Self::Grl, Self::GrlSft];

    pub fn uses_sft(self) -> bool {
        matches!(self, Self::ClSft | Self::GrlSft)
    }

    pub fn uses_dpo(self) -> bool {
        matches!(self, Self::ClDpo | Self::Grl)
    }

    pub fn uses_kl(self) -> bool {
        matches!(self, Self::Grl | Self::GrlSft)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cl => "cl",
            Self::ClSft => "cl_sft",
            Self::ClDpo => "cl_dpo",
            Self::Grl => "grl",
            Self::GrlSft => "grl_sft",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("expected one of cl, cl_sft, cl_dpo, grl, grl_sft, got `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub micro_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Save a checkpoint every this many steps; 0 saves only at epoch ends.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Grl,
            learning_rate: 2e-4,
            batch_size: 512,
            micro_batch_size: 32,
            epochs: 1,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
            checkpoint_every: 100,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.micro_batch_size == 0 || self.micro_batch_size > self.batch_size {
            return Err(Error::config(
                "train.micro_batch_size",
                format!("must be in 1..={}, got {}", self.batch_size, self.micro_batch_size),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("train.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta2", "must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::config("train.max_grad_norm", "must be non-negative"));
        }
        self.weights.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn setup(&self) -> LossSetup<'_> {
        LossSetup {
            strategy: self.strategy,
            weights: &self.weights,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_cl: f64,
    pub loss_sft: f64,
    pub loss_dpo: f64,
    pub loss_kl: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Number of steps one epoch over `n` examples takes.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Seeded example order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(epoch as u64)));
    order.shuffle(&mut rng);
    order
}

pub struct Trainer<T> {
    model: Model<T>,
    config: TrainConfig,
    optimizer: OptimizerState,
    reference: Option<ReferenceScorer<T>>,
    step: u64,
}

impl<T: Real> Trainer<T> {
    /// Takes the reference snapshot, so call this before any update.
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let reference = config.strategy.uses_dpo().then(|| ReferenceScorer::new(&model));
        Ok(Self {
            optimizer: OptimizerState::new(model.params()),
            model,
            config,
            reference,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn reference(&self) -> Option<&ReferenceScorer<T>> {
        self.reference.as_ref()
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Gradients, clipping, and one AdamW update on `examples`.
    pub fn step(&mut self, examples: &[TrainExample]) -> Result<StepMetrics> {
        let step = self.step + 1;
        let wrap = |e: Error| Error::Step {
            step: step as usize,
            source: Box::new(e),
        };
        let batch = collate(examples, self.model.config().max_seq_len).map_err(wrap)?;
        let dropout = self.model.lora().filter(|l| l.dropout > 0.0).map(|_| mix64(self.config.seed ^ mix64(step)));
        self.model.params_mut().zero_grad();
        let setup = LossSetup {
            strategy: self.config.strategy,
            weights: &self.config.weights,
        };
        let losses = gradcache_step(
            &mut self.model,
            self.reference.as_ref(),
            &batch,
            &setup,
            self.config.micro_batch_size,
            dropout,
        )
        .map_err(wrap)?;
        if !losses.total.is_finite() {
            return Err(wrap(Error::NonFinite(format!("loss_total = {}", losses.total))));
        }
        let grad_norm = clip_grad_norm(self.model.params_mut(), self.config.max_grad_norm);
        adamw_step(self.model.params_mut(), &mut self.optimizer, &self.config.adamw()).map_err(wrap)?;
        self.model.params_mut().zero_grad();
        self.step = step;
        Ok(StepMetrics {
            step,
            loss_total: losses.total,
            loss_cl: losses.cl,
            loss_sft: losses.sft,
            loss_dpo: losses.dpo,
            loss_kl: losses.kl,
            grad_norm,
            lr: self.config.learning_rate,
        })
    }

    /// One shuffled pass over `data`, calling `on_step` after every update.
    pub fn train_epoch(
        &mut self,
        data: &[TrainExample],
        epoch: usize,
        mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let order = epoch_order(data.len(), self.config.seed, epoch);
        let mut log = Vec::with_capacity(steps_per_epoch(data.len(), self.config.batch_size));
        for idx in order.chunks(self.config.batch_size) {
            let examples: Vec<TrainExample> = idx.iter().map(|&i| data[i].clone()).collect();
            let m = self.step(&examples)?;
            on_step(self, &m)?;
            log.push(m);
        }
        Ok(log)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let path = dir.join(OPTIMIZER_FILE);
        let json = serde_json::to_string(&self.optimizer)?;
        fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Runs every epoch, appending to `out/metrics.jsonl` and writing
    /// checkpoints to `out/checkpoints/step-NNNNNN` every
    /// `checkpoint_every` steps and `out/checkpoints/epoch-N` after each
    /// epoch. Returns the last epoch's checkpoint directory.
    pub fn fit(&mut self, data: &[TrainExample], out: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        let metrics_path = out.join("metrics.jsonl");
        let file = File::create(&metrics_path).map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        let mut metrics = BufWriter::new(file);
        let ckpt_root = out.join("checkpoints");
        let every = self.config.checkpoint_every as u64;
        let mut last = ckpt_root.clone();
        for epoch in 0..self.config.epochs {
            self.train_epoch(data, epoch, |t, m| {
                let line = serde_json::to_string(m)?;
                writeln!(metrics, "{line}").map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
                if every > 0 && m.step % every == 0 {
                    t.save(&ckpt_root.join(format!("step-{:06}", m.step)))?;
                }
                Ok(())
            })?;
            last = ckpt_root.join(format!("epoch-{}", epoch + 1));
            self.save(&last)?;
        }
        metrics.flush().map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        Ok(last)
    }
}

/// Reads an optimizer blob written by [`Trainer::save`].
pub fn load_optimizer(dir: &Path) -> Result<OptimizerState> {
    let path = dir.join(OPTIMIZER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
