//! Supervised stage: minibatch optimization of `λ·L_disease + L_report`
//! with per-epoch validation and best-checkpoint selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Example, LossParts, Model, ModelError};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::{Graph, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight `λ` of the disease-classification loss.
    pub lambda: f64,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub min_lr_fraction: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lr: 1e-3,
            min_lr_fraction: 0.1,
            warmup_steps: 50,
            batch_size: 16,
            epochs: 20,
            seed: 7,
            clip_norm: Some(1.0),
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::Config("train.lambda must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("train.batch_size must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(ModelError::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup followed by cosine decay to `min_lr_fraction·lr`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.min_lr_fraction;
        self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    pub val: LossParts,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_total,train_report,train_disease,val_total,val_report,val_disease";

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.train.total, r.train.report, r.train.disease, r.val.total, r.val.report, r.val.disease
        );
    }
    out
}

/// Mean loss parts over a dataset without building gradients.
pub fn evaluate_loss(model: &Model, data: &[Example], lambda: f64, chunk: usize) -> Result<LossParts, ModelError> {
    let mut sum = LossParts::default();
    if data.is_empty() {
        return Ok(sum);
    }
    for batch in data.chunks(chunk.max(1)) {
        let refs: Vec<&Example> = batch.iter().collect();
        let mut g = Graph::frozen(&model.params);
        let (_, parts) = model.supervised_loss(&mut g, &refs, lambda)?;
        let w = batch.len() as f64;
        sum.total += parts.total * w;
        sum.report += parts.report * w;
        sum.disease += parts.disease * w;
    }
    let n = data.len() as f64;
    Ok(LossParts {
        total: sum.total / n,
        report: sum.report / n,
        disease: sum.disease / n,
    })
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Parameters of the epoch with the lowest validation loss (the last
    /// epoch when there is no validation data).
    pub best: ParamStore,
    pub best_epoch: usize,
}

/// Trains `model` in place; the model ends with the best parameters.
/// `on_epoch` sees every finished epoch, e.g. for progress logging.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model),
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    let opt_config = OptimizerConfig {
        kind: config.optimizer,
        lr: config.lr,
        clip_norm: config.clip_norm,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(opt_config, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for batch_ids in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = batch_ids.iter().map(|&i| &train_set[i]).collect();
            let grads = {
                let mut g = Graph::trainable(&model.params);
                let (loss, parts) = model.supervised_loss(&mut g, &batch, config.lambda)?;
                g.backward(loss)?;
                let w = batch.len() as f64;
                sum.total += parts.total * w;
                sum.report += parts.report * w;
                sum.disease += parts.disease * w;
                g.gradients()
            };
            opt.config.lr = config.lr_at(opt.steps() as usize, total_steps);
            opt.step(&mut model.params, &grads);
        }
        let n = train_set.len() as f64;
        let train_parts = LossParts {
            total: sum.total / n,
            report: sum.report / n,
            disease: sum.disease / n,
        };
        let val = evaluate_loss(model, val_set, config.lambda, 16)?;
        let row = EpochLog {
            epoch,
            train: train_parts,
            val,
        };
        log::info!(
            "epoch {epoch}: train {:.4} (report {:.4}, disease {:.4}) val {:.4}",
            train_parts.total,
            train_parts.report,
            train_parts.disease,
            val.total
        );
        let score = if val_set.is_empty() { -(epoch as f64) } else { val.total };
        if score < best_val {
            best_val = score;
            best = model.params.clone();
            best_epoch = epoch;
        }
        on_epoch(&row, model);
        log.push(row);
    }
    model.params = best.clone();
    Ok(TrainOutcome { log, best, best_epoch })
}
