//! Teacher-forced training with AdaDelta, global-norm gradient clipping and
//! early stopping on validation sequence error rate.
//!
//! The batch loss is the sum of per-sample sequence losses. Within a batch,
//! samples are processed in ascending dataset index so that gradient
//! accumulation order does not depend on the shuffle.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub rho: Scalar,
    pub epsilon: Scalar,
    pub batch_size: usize,
    pub clip_norm: Scalar,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-8,
            batch_size: 8,
            clip_norm: 100.0,
            patience_epochs: 15,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("train config: {m}")));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.patience_epochs < 1 {
            return bad("patience_epochs must be ≥ 1");
        }
        Ok(())
    }
}

/// AdaDelta running averages `E[g²]` and `E[Δx²]`, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDelta {
    pub rho: Scalar,
    pub epsilon: Scalar,
    pub sq_grad: Vec<Tensor>,
    pub sq_delta: Vec<Tensor>,
}

impl AdaDelta {
    pub fn new(params: &[Tensor], rho: Scalar, epsilon: Scalar) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            rho,
            epsilon,
            sq_grad: zeros(),
            sq_delta: zeros(),
        }
    }

    /// In place:
    /// `E[g²] ← ρE[g²] + (1−ρ)g²`,
    /// `Δx = −√(E[Δx²]+ε) / √(E[g²]+ε) · g`,
    /// `E[Δx²] ← ρE[Δx²] + (1−ρ)Δx²`, `x ← x + Δx`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.sq_grad.len() {
            return Err(Error::Argument(
                "parameter, gradient and accumulator counts differ".into(),
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {i}")));
        }
        let (rho, eps) = (self.rho, self.epsilon);
        for (((p, g), eg), ed) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.sq_grad)
            .zip(&mut self.sq_delta)
        {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adadelta",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            for (((x, &gi), a), d) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(eg.data_mut())
                .zip(ed.data_mut())
            {
                *a = rho * *a + (1.0 - rho) * gi * gi;
                let delta = -((*d + eps).sqrt() / (*a + eps).sqrt()) * gi;
                *d = rho * *d + (1.0 - rho) * delta * delta;
                *x += delta;
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> Scalar {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<Scalar>()
        .sqrt()
}

/// Rescales all gradients by `clip_norm / ‖g‖` when the global L2 norm
/// exceeds `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: Scalar) -> Scalar {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Patience counter on a quantity that should decrease (validation SER).
/// Only a strict improvement resets patience.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Scalar,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: Scalar::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the value for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: Scalar) -> (bool, bool) {
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }
}

/// Source of the per-epoch validation report.
pub trait Validator {
    fn validate(&mut self, model: &Model, epoch: usize) -> Result<EvalReport>;
}

/// Greedy-decodes a fixed sample set and scores it.
pub struct SampleValidator<'a> {
    pub samples: &'a [Sample],
}

impl Validator for SampleValidator<'_> {
    fn validate(&mut self, model: &Model, _epoch: usize) -> Result<EvalReport> {
        evaluate_samples(model, self.samples)
    }
}

/// Recognises every sample and scores hypotheses against targets.
pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let r = model.recognize(&s.image)?;
        pairs.push((s.target.clone(), r.tokens));
    }
    evaluate(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Scalar,
    pub val_cer: Scalar,
    pub val_ser: Scalar,
    pub improved: bool,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_cer,val_ser,improved";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_cer,
            self.val_ser,
            u8::from(self.improved)
        )
    }
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.to_csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Model, optimizer state and epoch counter of one training run.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdaDelta,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub stopper: EarlyStopping,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdaDelta::new(model.params.tensors(), config.rho, config.epsilon);
        let stopper = EarlyStopping::new(config.patience_epochs);
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            stopper,
        })
    }

    /// Continues from a checkpoint: weights, accumulators, epoch counter and
    /// best validation SER are restored; hyperparameters come from `config`.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ckpt.to_model()?;
        let mut optimizer = AdaDelta::new(model.params.tensors(), config.rho, config.epsilon);
        if let Some((sq_grad, sq_delta)) = &ckpt.optimizer {
            optimizer.sq_grad = sq_grad.clone();
            optimizer.sq_delta = sq_delta.clone();
        }
        let mut stopper = EarlyStopping::new(config.patience_epochs);
        stopper.best = ckpt.best_val_ser;
        stopper.best_epoch = ckpt.best_epoch as usize;
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: ckpt.epoch as usize,
            stopper,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            &self.config,
            Some(&self.optimizer),
            self.epoch as u64,
            self.stopper.best,
            self.stopper.best_epoch as u64,
        )
    }

    /// Sample order for `epoch` (1-based); depends only on the seed, the
    /// epoch and the dataset size.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let stream = self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
        order
    }

    /// One pass over `train`; returns the summed loss.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<Scalar> {
        if train.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let shape = train[batch[0]].image.shape();
            if batch.iter().any(|&i| train[i].image.shape() != shape) {
                return Err(Error::Argument(format!(
                    "epoch {epoch} batch {b}: images in a batch must share one size"
                )));
            }
            let mut grads: Vec<Tensor> = self
                .model
                .params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            let mut batch_loss = 0.0;
            for &i in &batch {
                let s = &train[i];
                let (loss, g) = self
                    .model
                    .loss_and_grads(&s.image, &s.target)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!(
                            "epoch {epoch} batch {b} sample {}: {m}",
                            s.id
                        )),
                        other => other,
                    })?;
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} batch {b}: loss {batch_loss}"
                )));
            }
            clip_gradients(&mut grads, self.config.clip_norm);
            self.optimizer
                .step(self.model.params.tensors_mut(), &grads)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
            epoch_loss += batch_loss;
        }
        self.epoch = epoch;
        Ok(epoch_loss)
    }

    /// Trains until `max_epochs` total epochs or until validation SER has
    /// not improved for `patience_epochs` epochs.
    pub fn fit(&mut self, train: &[Sample], validator: &mut impl Validator) -> Result<TrainOutcome> {
        let mut best = self.checkpoint();
        let mut log = Vec::new();
        let mut stop = StopReason::MaxEpochs;
        while self.epoch < self.config.max_epochs {
            let train_loss = self.run_epoch(train)?;
            let report = validator.validate(&self.model, self.epoch)?;
            let (improved, patience_out) = self.stopper.observe(self.epoch, report.ser);
            info!(
                "epoch {} loss {:.4} val cer {:.4} ser {:.4}{}",
                self.epoch,
                train_loss,
                report.cer,
                report.ser,
                if improved { " *" } else { "" }
            );
            log.push(EpochLog {
                epoch: self.epoch,
                train_loss,
                val_cer: report.cer,
                val_ser: report.ser,
                improved,
            });
            if improved {
                best = self.checkpoint();
            }
            if patience_out {
                stop = StopReason::Patience;
                break;
            }
        }
        if log.is_empty() {
            warn!("no epochs run (max_epochs {})", self.config.max_epochs);
        }
        Ok(TrainOutcome {
            best,
            last: self.checkpoint(),
            log,
            stop,
        })
    }
}

/// Trains `model` from scratch on `train`, validating on `val` each epoch.
pub fn train(model: Model, train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.fit(train, &mut SampleValidator { samples: val })
}
