//! Mini-batch Adam training with dev-set model selection, and evaluation
//! metrics.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::config::{Config, EarlyStop};
use crate::data::{EmbeddingTable, Instance, Polarity};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Prediction, NUM_CLASSES};
use crate::tensor::Tensor;

/// Adam with bias correction; moments are kept dense per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(config: &Config) -> Self {
        let t = &config.train;
        Adam::new(t.lr, t.beta1, t.beta2, t.eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.value.rows(), p.value.cols()), Tensor::zeros(p.value.rows(), p.value.cols())));
            let g = p.grad.as_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (k, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean root-refinement loss over training instances.
    pub loss_a: f64,
    /// Mean sentiment loss over training instances.
    pub loss_s: f64,
    pub dev_acc: f64,
    pub dev_macro_f1: f64,
    /// Mean aspect root mass over the epoch's training passes.
    pub aspect_root_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: Polarity,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub aspect_root_mass: f64,
    pub total: usize,
}

impl EvalReport {
    /// Metrics from gold/predicted label pairs.
    pub fn from_pairs(pairs: &[(Polarity, Polarity)], aspect_root_mass: f64) -> Self {
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (g, p) in pairs {
            confusion[g.index()][p.index()] += 1;
        }
        let total = pairs.len();
        let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class: Vec<ClassMetrics> = Polarity::ALL
            .iter()
            .map(|&label| {
                let c = label.index();
                let gold: usize = confusion[c].iter().sum();
                let predicted: usize = (0..NUM_CLASSES).map(|g| confusion[g][c]).sum();
                let precision = ratio(confusion[c][c], predicted);
                let recall = ratio(confusion[c][c], gold);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics { label, precision, recall, f1, gold, predicted }
            })
            .collect();
        let counted: Vec<f64> = per_class
            .iter()
            .filter(|m| m.gold > 0 || m.predicted > 0)
            .map(|m| m.f1)
            .collect();
        let macro_f1 = if counted.is_empty() { 0.0 } else { counted.iter().sum::<f64>() / counted.len() as f64 };
        EvalReport {
            accuracy: ratio(correct, total),
            macro_f1,
            per_class,
            confusion,
            aspect_root_mass,
            total,
        }
    }

    pub fn metric(&self, which: EarlyStop) -> f64 {
        match which {
            EarlyStop::Accuracy => self.accuracy,
            EarlyStop::MacroF1 => self.macro_f1,
        }
    }
}

/// Predictions for every instance, in order.
pub fn predict_all(model: &Model, instances: &[Instance]) -> Result<Vec<Prediction>> {
    instances.par_iter().map(|inst| model.predict(inst)).collect()
}

pub fn evaluate(model: &Model, instances: &[Instance]) -> Result<EvalReport> {
    let predictions = predict_all(model, instances)?;
    Ok(report_for(instances, &predictions))
}

pub fn report_for(instances: &[Instance], predictions: &[Prediction]) -> EvalReport {
    let pairs: Vec<(Polarity, Polarity)> = instances.iter().zip(predictions).map(|(i, p)| (i.polarity, p.label)).collect();
    let mass = if predictions.is_empty() {
        0.0
    } else {
        predictions.iter().map(|p| p.aspect_root_mass).sum::<f64>() / predictions.len() as f64
    };
    EvalReport::from_pairs(&pairs, mass)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct InstanceStep {
    grads: Gradients,
    loss_a: f64,
    loss_s: f64,
    root_mass: f64,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-instance dropout seed, distinct for every (epoch, position) pair.
fn dropout_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d80b_0000_0000);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rand::Rng::gen(&mut rng)
}

/// Train from scratch. Returns the snapshot with the best dev metric (ties
/// keep the earlier epoch) and one log entry per epoch.
pub fn train(train_set: &[Instance], dev_set: &[Instance], table: &EmbeddingTable, config: &Config) -> Result<TrainOutcome> {
    train_with(train_set, dev_set, table, config, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch is logged.
pub fn train_with(
    train_set: &[Instance],
    dev_set: &[Instance],
    table: &EmbeddingTable,
    config: &Config,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if dev_set.is_empty() {
        return Err(Error::Invalid("dev set is empty".into()));
    }
    let mut model = Model::new(config.clone(), table)?;
    let mut adam = Adam::from_config(config);
    let seed = config.train.seed;
    let mut log = Vec::with_capacity(config.train.max_epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=config.train.max_epochs {
        let order = epoch_order(train_set.len(), seed, epoch);
        let (mut sum_a, mut sum_s, mut sum_mass) = (0.0, 0.0, 0.0);
        for (batch_no, batch) in order.chunks(config.train.batch_size).enumerate() {
            let steps: Vec<Result<InstanceStep>> = batch
                .par_iter()
                .map(|&idx| {
                    let inst = &train_set[idx];
                    let mut tape = Tape::new();
                    let mode = Mode::Train { dropout_seed: dropout_seed(seed, epoch, idx) };
                    let pass = model.forward(&mut tape, inst, mode)?;
                    let loss = tape.value(pass.loss).item();
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, batch: batch_no + 1 });
                    }
                    let grads = tape.gradients(pass.loss).map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: batch_no + 1 },
                        other => other.for_instance(&inst.id),
                    })?;
                    let marg = pass.marginals.read(&tape);
                    Ok(InstanceStep {
                        grads,
                        loss_a: tape.value(pass.loss_a).item(),
                        loss_s: tape.value(pass.loss_s).item(),
                        root_mass: crate::model::aspect_root_mass(&marg, pass.aspect_rows.clone()),
                    })
                })
                .collect();
            model.params.zero_grad();
            for step in steps {
                let step = step?;
                model.params.accumulate(&step.grads)?;
                sum_a += step.loss_a;
                sum_s += step.loss_s;
                sum_mass += step.root_mass;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            adam.step(&mut model.params);
        }

        let dev = evaluate(&model, dev_set)?;
        let n = train_set.len() as f64;
        let entry = EpochLog {
            epoch,
            loss_a: sum_a / n,
            loss_s: sum_s / n,
            dev_acc: dev.accuracy,
            dev_macro_f1: dev.macro_f1,
            aspect_root_mass: sum_mass / n,
        };
        info!(
            "epoch {epoch}: loss_a {:.4} loss_s {:.4} dev_acc {:.4} dev_f1 {:.4} root_mass {:.4}",
            entry.loss_a, entry.loss_s, entry.dev_acc, entry.dev_macro_f1, entry.aspect_root_mass
        );
        on_epoch(&entry);
        log.push(entry);

        let score = dev.metric(config.train.early_stop);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.params.clone()));
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    model.params.zero_grad();
    Ok(TrainOutcome { model, best_epoch, log })
}
