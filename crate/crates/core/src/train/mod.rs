//! Objective, optimizer and the training loop.
//!
//! Samples are visited in ascending id order, optionally permuted per epoch by
//! a seeded RNG, so a run depends only on the dataset contents and the seed and
//! not on the order samples arrived in.

mod adam;
mod loss;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use loss::{abs_loss, sd_loss, total_loss, total_loss_with_teacher, LossReport, LossTerms};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of each self-distillation term.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter init and the per-epoch sample order.
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    /// Stop gradient through the pooled decoder output in distillation terms.
    pub sdm_detach_teacher: bool,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: usize,
    pub shuffle: bool,
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            adam_eps: 1e-8,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            grad_clip_norm: Some(1.0),
            sdm_detach_teacher: true,
            warmup_steps: 0,
            shuffle: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be a finite non-negative number");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return fail("weight_decay must be >= 0 and adam_eps > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return fail("grad_clip_norm must be positive when set");
        }
        Ok(())
    }

    /// Learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub abs: f64,
    pub sd: BTreeMap<usize, f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Mean target tokens per sample in the batch.
    pub tokens: f64,
}

impl StepRecord {
    /// Abstractive loss per target token.
    pub fn per_token_abs(&self) -> f64 {
        self.abs / self.tokens.max(1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

/// Visiting order of sample indices for each epoch.
pub fn epoch_orders(dataset: &Dataset, tc: &TrainConfig) -> impl Iterator<Item = Vec<usize>> {
    let mut base: Vec<usize> = (0..dataset.len()).collect();
    base.sort_by(|&a, &b| dataset.samples[a].id.cmp(&dataset.samples[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let shuffle = tc.shuffle;
    (0..tc.epochs).map(move |_| {
        let mut order = base.clone();
        if shuffle {
            order.shuffle(&mut rng);
        }
        order
    })
}

/// Forward and backward over one batch. Losses and gradients are means over
/// the batch; `grads` receives the accumulated gradient.
pub fn batch_gradients(
    model: &FusionModel,
    dataset: &Dataset,
    batch: &[usize],
    tc: &TrainConfig,
    grads: &mut [Vec<f64>],
    step: usize,
) -> Result<LossReport> {
    let scale = 1.0 / batch.len() as f64;
    let mut acc = LossReport::default();
    for &i in batch {
        let sample = &dataset.samples[i];
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let fwd = model.forward(&bound);
        let (terms, report) = total_loss(&mut g, &fwd, sample, tc)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample: sample.id.clone(),
                step,
            });
        }
        g.backward(terms.total)?;
        for (acc_g, &v) in grads.iter_mut().zip(&bound) {
            if let Some(gr) = g.grad(v) {
                acc_g.iter_mut().zip(gr).for_each(|(a, &x)| *a += scale * x);
            }
        }
        acc.abs_loss += scale * report.abs_loss;
        for (l, v) in report.sd_loss_per_layer {
            *acc.sd_loss_per_layer.entry(l).or_insert(0.0) += scale * v;
        }
        acc.token_count += report.token_count;
    }
    acc.total = acc.abs_loss + acc.sd_loss_per_layer.values().sum::<f64>();
    Ok(acc)
}

/// Trains `model` in place.
pub fn train(dataset: &Dataset, model: &mut FusionModel, tc: &TrainConfig) -> Result<TrainLog> {
    train_with(dataset, model, tc, |_, _| Ok(()))
}

/// As [`train`], calling `on_step` after every optimizer step.
pub fn train_with(
    dataset: &Dataset,
    model: &mut FusionModel,
    tc: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &FusionModel) -> Result<()>,
) -> Result<TrainLog> {
    tc.validate()?;
    model.config().validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut state = AdamState::new(model.params());
    let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    'epochs: for (epoch, order) in epoch_orders(dataset, tc).enumerate() {
        for batch in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            let report = batch_gradients(model, dataset, batch, tc, &mut grads, step)?;
            let grad_norm = clip_grad_norm(&mut grads, tc.grad_clip_norm);
            let lr = tc.lr_at(step);
            adam_step(model.params_mut(), &mut grads, &mut state, tc, lr);
            if !model.params().is_finite() {
                return Err(Error::NonFiniteLoss {
                    sample: format!("batch of {}", batch.len()),
                    step,
                });
            }
            let record = StepRecord {
                step,
                epoch: epoch + 1,
                abs: report.abs_loss,
                sd: report.sd_loss_per_layer,
                total: report.total,
                grad_norm,
                lr,
                tokens: report.token_count as f64 / batch.len() as f64,
            };
            log::debug!(
                "step {step} epoch {} total {:.5} abs {:.5} |g| {:.4}",
                record.epoch,
                record.total,
                record.abs,
                grad_norm
            );
            on_step(&record, model)?;
            log.records.push(record);
        }
    }
    Ok(log)
}
