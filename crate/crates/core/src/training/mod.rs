//! Training of the per-layer matchers and the auxiliary linear classifier.
//!
//! The objective for one query is `beta · L1 + L2`: `L1` is softmax
//! cross-entropy over the episode's class scores, `L2` is cross-entropy of a
//! linear classifier over all training classes applied to the query's mean
//! embedding at the last selected layer (pooled, not reweighted).
//!
//! Gradients come from [`graph`], a recorder specialised to this pipeline.
//! Discrete choices made in the forward pass (pixel assignment, top-k pixels,
//! best layer) are held fixed when differentiating.

mod graph;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{argmax_first, episode_rng, group_labels, sample_from_groups, Hyperparams};
use crate::pipeline::PooledBank;
use crate::spm::MatcherSet;

pub use graph::{
    backward, episode_forward, prepare_episode, EpisodeTrace, PreparedEpisode, QueryTrace,
};

/// Linear classifier over training classes; `w` is `class_count × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub class_count: usize,
    pub c: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(class_count: usize, c: usize) -> Self {
        Self {
            class_count,
            c,
            w: vec![0.0; class_count * c],
            b: vec![0.0; class_count],
        }
    }

    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.c)
            .zip(&self.b)
            .map(|(row, b)| crate::tensor::dot(row, embedding) + b)
            .collect()
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub matchers: MatcherSet,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.values_mut().for_each(|v| *v = 0.0);
        z
    }

    pub fn len(&self) -> usize {
        self.matchers.param_count() + self.classifier.w.len() + self.classifier.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matcher layers in order (`W1, b1, W2, b2` each), then classifier `w, b`.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.matchers
            .layers
            .iter()
            .flat_map(|l| l.params.values())
            .chain(&self.classifier.w)
            .chain(&self.classifier.b)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.matchers
            .layers
            .iter_mut()
            .flat_map(|l| l.params.values_mut())
            .chain(self.classifier.w.iter_mut())
            .chain(self.classifier.b.iter_mut())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.classifier.class_count == other.classifier.class_count
            && self.classifier.c == other.classifier.c
            && self
                .matchers
                .layers
                .iter()
                .zip(&other.matchers.layers)
                .all(|(a, b)| a.layer_id == b.layer_id && a.params.c == b.params.c)
            && self.matchers.layers.len() == other.matchers.layers.len()
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::invalid("parameter shapes differ"));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub episodes_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            learning_rate: 0.01,
            decay_factor: 0.05,
            decay_epochs: vec![4, 6, 8],
            epochs: 10,
            seed: 42,
            steps_per_epoch: 50,
            episodes_per_step: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay factor must lie in (0, 1]".into()));
        }
        if self.steps_per_epoch == 0 || self.episodes_per_step == 0 {
            return Err(Error::Config(
                "steps and episodes per step must be positive".into(),
            ));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }
}

/// Softmax cross-entropy with max subtraction; returns the loss and the
/// softmax probabilities.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let probs = logits.iter().map(|l| (l - log_z).exp()).collect();
    Ok((log_z - logits[target], probs))
}

/// Cross-entropy over an episode's class scores.
pub fn metric_loss(class_scores: &[f64], true_class: usize) -> Result<f64> {
    if class_scores.len() < 2 {
        return Err(Error::invalid("metric loss needs at least two classes"));
    }
    softmax_cross_entropy(class_scores, true_class).map(|r| r.0)
}

pub fn classifier_loss(embedding: &[f64], p: &ClassifierParams, true_class: usize) -> Result<f64> {
    if embedding.len() != p.c {
        return Err(Error::invalid(format!(
            "classifier expects {} features, got {}",
            p.c,
            embedding.len()
        )));
    }
    softmax_cross_entropy(&p.logits(embedding), true_class).map(|r| r.0)
}

pub fn total_loss(l1: f64, l2: f64, beta: f64) -> f64 {
    beta * l1 + l2
}

/// Base rate times `decay_factor` for every decay epoch already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let hits = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.learning_rate * cfg.decay_factor.powi(hits as i32)
}

pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    params.add_scaled(grads, -lr)
}

/// Initial parameters: seeded small matchers, zero classifier.
pub fn init_params(bank: &PooledBank, seed: u64) -> ModelParams {
    let channels = bank.channels();
    let last_c = channels.last().map_or(0, |c| c.1);
    ModelParams {
        matchers: MatcherSet::init(&channels, seed),
        classifier: ClassifierParams::zeros(bank.class_count as usize, last_c),
    }
}

/// Summary of a batch forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub correct: usize,
    pub queries: usize,
}

/// Mean loss and its gradient over a batch of prepared episodes (each
/// episode's loss is the mean over its queries).
pub fn batch_loss_and_grad(
    batch: &[PreparedEpisode],
    params: &ModelParams,
    hp: &Hyperparams,
    beta: f64,
) -> Result<(BatchStats, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|ep| {
            let trace = episode_forward(ep, params, hp, beta, true)?;
            let g = backward(&trace, params, scale)?;
            Ok((stats_of(&trace), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = params.zeros_like();
    let mut stats = BatchStats::default();
    for (s, g) in parts {
        grads.add_scaled(&g, 1.0)?;
        stats.l1 += s.l1 * scale;
        stats.l2 += s.l2 * scale;
        stats.total += s.total * scale;
        stats.correct += s.correct;
        stats.queries += s.queries;
    }
    Ok((stats, grads))
}

/// Mean loss over a batch without recording intermediates.
pub fn batch_loss(
    batch: &[PreparedEpisode],
    params: &ModelParams,
    hp: &Hyperparams,
    beta: f64,
) -> Result<f64> {
    let total: f64 = batch
        .iter()
        .map(|ep| episode_forward(ep, params, hp, beta, false).map(|t| t.loss))
        .sum::<Result<f64>>()?;
    Ok(total / batch.len() as f64)
}

fn stats_of(trace: &EpisodeTrace) -> BatchStats {
    let q = trace.queries.len() as f64;
    BatchStats {
        l1: trace.queries.iter().map(|t| t.l1).sum::<f64>() / q,
        l2: trace.queries.iter().map(|t| t.l2).sum::<f64>() / q,
        total: trace.loss,
        correct: trace
            .queries
            .iter()
            .filter(|t| argmax_first(&t.class_scores) == t.true_pos)
            .count(),
        queries: trace.queries.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub mean_total: f64,
    pub train_accuracy: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,mean_l1,mean_l2,mean_total,train_accuracy\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, e.lr, e.mean_l1, e.mean_l2, e.mean_total, e.train_accuracy
        );
    }
    s
}

/// Episodic SGD. Each step samples `episodes_per_step` fresh episodes from
/// per-step RNG streams, so results do not depend on thread count.
pub fn train(
    bank: &PooledBank,
    hp: &Hyperparams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    hp.validate()?;
    cfg.validate()?;
    let score_cfg = hp.score_config();
    let groups = group_labels(&bank.labels, bank.class_count);
    let mut params = init_params(bank, cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut acc = BatchStats::default();
        for step in 0..cfg.steps_per_epoch {
            let base = ((epoch * cfg.steps_per_epoch + step) * cfg.episodes_per_step) as u64;
            let batch = (0..cfg.episodes_per_step as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = episode_rng(cfg.seed ^ 0x5EED_7A1B, base + i);
                    let ep = sample_from_groups(&groups, hp, &mut rng)?;
                    prepare_episode(bank, &ep, &score_cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let (stats, grads) = batch_loss_and_grad(&batch, &params, hp, cfg.beta)?;
            sgd_step(&mut params, &grads, lr)?;
            acc.l1 += stats.l1;
            acc.l2 += stats.l2;
            acc.total += stats.total;
            acc.correct += stats.correct;
            acc.queries += stats.queries;
        }
        let steps = cfg.steps_per_epoch as f64;
        log.push(EpochLog {
            epoch,
            lr,
            mean_l1: acc.l1 / steps,
            mean_l2: acc.l2 / steps,
            mean_total: acc.total / steps,
            train_accuracy: acc.correct as f64 / acc.queries.max(1) as f64,
        });
    }
    Ok((params, log))
}
