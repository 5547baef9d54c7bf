//! Objective, minibatch training loop and evaluation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::ExampleBatch;
use crate::error::{Error, Result};
use crate::hmdrr::{CodebookUsage, LevelUsage};
use crate::model::Model;
use crate::numeric::{adam_step, AdamConfig, AdamState, Params};
use crate::rng::SeededRng;

pub const PROB_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy with predictions clamped away from 0 and 1.
pub fn logloss(y_hat: &[f64], y: &[f64]) -> f64 {
    assert_eq!(y_hat.len(), y.len(), "logloss length mismatch");
    let n = y.len() as f64;
    let sum: f64 = y_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    -sum / n
}

/// `L_ce + alpha * l_rq`.
pub fn total_loss(y_hat: &[f64], y: &[f64], l_rq: f64, alpha: f64) -> f64 {
    logloss(y_hat, y) + alpha * l_rq
}

/// d logloss / d y_hat. Zero where the clamp is active.
pub fn cross_entropy_grad(y_hat: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    y_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                (p - t) / (p * (1.0 - p) * n)
            }
        })
        .collect()
}

/// Rank-based AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc inputs", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            block: "auc scores".into(),
            step: None,
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                pos_rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many steps, besides each epoch end.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 1e-3,
            batch_size: 256,
            epochs: 3,
            seed: 0,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        Self {
            step,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
    /// `None` without a quantizer.
    pub l_rq: Option<f64>,
    pub usage: Option<Vec<LevelUsage>>,
    pub step: usize,
    pub epoch: usize,
}

impl Metrics {
    pub fn records(&self, split: &str) -> Vec<MetricRecord> {
        let mut out = vec![
            MetricRecord::new(self.step, split, "auc", self.auc),
            MetricRecord::new(self.step, split, "logloss", self.logloss),
        ];
        if let Some(l) = self.l_rq {
            out.push(MetricRecord::new(self.step, split, "l_rq", l));
        }
        for u in self.usage.iter().flatten() {
            out.push(MetricRecord::new(
                self.step,
                split,
                &format!("usage_entropy_level_{}", u.level),
                u.entropy,
            ));
        }
        out
    }
}

const EVAL_CHUNK: usize = 4096;

/// Predictions for `data`, forward-only, in chunks.
pub fn predict(model: &Model, data: &ExampleBatch) -> Result<Vec<f64>> {
    Ok(forward_chunks(model, data)?.0)
}

fn forward_chunks(model: &Model, data: &ExampleBatch) -> Result<(Vec<f64>, f64, Option<CodebookUsage>)> {
    let mut y_hat = Vec::with_capacity(data.len());
    let mut l_rq_sum = 0.0;
    let mut usage = model
        .quantizer
        .as_ref()
        .map(|q| CodebookUsage::new(q.depth(), q.codebook_size()));
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let chunk = data.slice(start..end);
        let pass = model.forward(&chunk, None)?;
        if let (Some(u), Some(q)) = (&mut usage, &pass.quantized) {
            u.record(q);
        }
        l_rq_sum += pass.l_rq() * chunk.len() as f64;
        y_hat.extend(pass.y_hat);
        start = end;
    }
    Ok((y_hat, l_rq_sum / data.len().max(1) as f64, usage))
}

/// Code usage of the model's quantizer over `data`; `None` without one.
pub fn code_usage(model: &Model, data: &ExampleBatch) -> Result<Option<CodebookUsage>> {
    Ok(forward_chunks(model, data)?.2)
}

/// Forward-only metrics over `data`.
pub fn evaluate(model: &Model, data: &ExampleBatch) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::UndefinedMetric("evaluation split is empty".into()));
    }
    let (y_hat, l_rq, usage) = forward_chunks(model, data)?;
    Ok(Metrics {
        auc: auc(&y_hat, &data.labels)?,
        logloss: logloss(&y_hat, &data.labels),
        l_rq: model.quantizer.as_ref().map(|_| l_rq),
        usage: usage.map(|u| u.stats()),
        step: 0,
        epoch: 0,
    })
}

/// Summary of one pass over the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: usize,
    /// Example-weighted mean of the per-batch objective.
    pub train_loss: f64,
}

/// Optimizer state and RNG streams for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: usize,
    pub epoch: usize,
    shuffle_rng: SeededRng,
    code_rng: SeededRng,
    usage: Option<CodebookUsage>,
}

const SHUFFLE_STREAM: u64 = 11;
const CODEBOOK_STREAM: u64 = 12;

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let usage = model
            .quantizer
            .as_ref()
            .map(|q| CodebookUsage::new(q.depth(), q.codebook_size()));
        Ok(Self {
            adam: AdamState::new(model, config.adam()),
            step: 0,
            epoch: 0,
            shuffle_rng: SeededRng::derive(config.seed, SHUFFLE_STREAM),
            code_rng: SeededRng::derive(config.seed, CODEBOOK_STREAM),
            usage,
            config,
        })
    }

    /// One optimizer step on `batch`. Returns the objective before the update.
    pub fn step(&mut self, model: &mut Model, batch: &ExampleBatch) -> Result<f64> {
        model.ensure_codebooks(batch, &mut self.code_rng)?;
        let pass = model.forward(batch, None)?;
        let loss = model.loss(batch, &pass, self.config.alpha);
        self.step += 1;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                block: nonfinite_block(model, &pass),
                step: Some(self.step),
            });
        }
        let grads = model.backward(batch, &pass, self.config.alpha)?;
        let step = self.step;
        adam_step(&mut self.adam, model, &grads).map_err(|e| match e {
            Error::NonFinite { block, .. } => Error::NonFinite {
                block: nonfinite_param(model).unwrap_or(block),
                step: Some(step),
            },
            other => other,
        })?;
        model.enforce_frozen_rows();
        if let (Some(u), Some(q)) = (&mut self.usage, &pass.quantized) {
            u.record(q);
            let every = model.quantizer.as_ref().and_then(|q| q.config.restart_dead_codes_every);
            if let Some(every) = every {
                if self.step.is_multiple_of(every) {
                    if let Some(quant) = &mut model.quantizer {
                        quant.restart_dead_codes(u, q, &mut self.code_rng);
                    }
                    u.reset();
                }
            }
        }
        Ok(loss)
    }

    /// One seeded-shuffled pass over `train`. `on_step` sees every step's
    /// loss; evaluation on `test` runs every `eval_every` steps when given.
    pub fn train_epoch(
        &mut self,
        model: &mut Model,
        train: &ExampleBatch,
        test: Option<&ExampleBatch>,
        sink: &mut dyn FnMut(MetricRecord),
    ) -> Result<EpochSummary> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = train.select(chunk);
            let loss = self.step(model, &batch)?;
            weighted += loss * chunk.len() as f64;
            sink(MetricRecord::new(self.step, "train", "loss", loss));
            if let (Some(every), Some(test)) = (self.config.eval_every, test) {
                if self.step.is_multiple_of(every) {
                    let mut m = evaluate(model, test)?;
                    m.step = self.step;
                    m.epoch = self.epoch;
                    m.records("test").into_iter().for_each(&mut *sink);
                }
            }
        }
        self.epoch += 1;
        let summary = EpochSummary {
            epoch: self.epoch,
            step: self.step,
            train_loss: weighted / train.len() as f64,
        };
        sink(MetricRecord::new(self.step, "train", "epoch_loss", summary.train_loss));
        Ok(summary)
    }
}

fn nonfinite_param(model: &Model) -> Option<String> {
    model
        .blocks()
        .into_iter()
        .find(|(_, m)| !m.is_finite())
        .map(|(name, _)| name)
}

fn nonfinite_block(model: &Model, pass: &crate::model::ForwardPass) -> String {
    nonfinite_param(model).unwrap_or_else(|| {
        if pass.l_rq().is_finite() {
            "prediction".into()
        } else {
            "quantizer".into()
        }
    })
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub epochs: Vec<EpochSummary>,
    pub test: Option<Metrics>,
}

/// Trains `model` for `config.epochs` epochs and evaluates on `test`.
pub fn fit(
    mut model: Model,
    train: &ExampleBatch,
    test: Option<&ExampleBatch>,
    config: &TrainConfig,
    sink: &mut dyn FnMut(MetricRecord),
) -> Result<RunOutcome> {
    train.validate(&model.schema)?;
    if let Some(t) = test {
        t.validate(&model.schema)?;
    }
    let mut trainer = Trainer::new(&model, config.clone())?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        epochs.push(trainer.train_epoch(&mut model, train, test, sink)?);
    }
    let metrics = match test {
        Some(t) => {
            let mut m = evaluate(&model, t)?;
            m.step = trainer.step;
            m.epoch = trainer.epoch;
            m.records("test").into_iter().for_each(&mut *sink);
            Some(m)
        }
        None => None,
    };
    Ok(RunOutcome {
        model,
        epochs,
        test: metrics,
    })
}
