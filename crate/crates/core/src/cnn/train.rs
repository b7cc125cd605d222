//! Mini-batch training with cross-entropy loss and AdaMax.

use serde::{Deserialize, Serialize};

use super::adamax::{adamax_step, AdamaxConfig, AdamaxState};
use super::arch::Architecture;
use super::folds::split_train_validation;
use super::{mix_seed, CnnModel, Network};
use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;

/// Samples pushed through the network at once; a batch is processed as a
/// fixed sequence of such chunks.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 128,
            epochs: 50,
            val_fraction: 0.2,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("folds must be at least 2"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.alpha > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("invalid AdaMax hyper-parameters"));
        }
        Ok(())
    }

    pub fn adamax(&self) -> AdamaxConfig {
        AdamaxConfig {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamaxConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: CnnModel,
    pub trace: Vec<EpochStats>,
}

/// Trains the cough detector on labeled spectrograms (`labels[i]` is 0 for
/// non-cough, 1 for cough). The validation split is monitored, never used
/// for early stopping.
pub fn train(specs: &[Spectrogram], labels: &[usize], config: &TrainConfig) -> Result<TrainedModel> {
    train_with_architecture(Architecture::cough_detector(), specs, labels, config)
}

pub fn train_with_architecture(
    arch: Architecture,
    specs: &[Spectrogram],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let inputs: Vec<Vec<f32>> = specs.iter().map(|s| s.values().iter().copied().collect()).collect();
    train_raw(arch, &inputs, labels, config)
}

pub(crate) fn train_raw(arch: Architecture, inputs: &[Vec<f32>], labels: &[usize], config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", inputs.len()), labels.len()));
    }
    if inputs.len() < 2 * config.batch_size {
        return Err(Error::invalid(format!(
            "{} samples; training needs at least {} (two batches)",
            inputs.len(),
            2 * config.batch_size
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::invalid("training data contains a single class"));
    }

    let seed = config.seed;
    let mut net = Network::<f32>::init(arch, mix_seed(&[seed, 1]))?;
    let in_len = net.input_len();
    if let Some(bad) = inputs.iter().position(|x| x.len() != in_len) {
        return Err(Error::shape(format!("{in_len} input values"), format!("{} in sample {bad}", inputs[bad].len())));
    }
    let (mut train_idx, val_idx) = split_train_validation(labels, config.val_fraction, mix_seed(&[seed, 2]))?;

    let mut states: Vec<(AdamaxState<f32>, AdamaxState<f32>)> = net
        .params()
        .iter()
        .map(|p| (AdamaxState::new(p.weights.len()), AdamaxState::new(p.biases.len())))
        .collect();
    let adamax = config.adamax();
    let mut step: u64 = 0;
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        train_idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 3, epoch as u64])));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, batch) in train_idx.chunks(config.batch_size).enumerate() {
            let mut grads = net.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for (c, chunk) in batch.chunks(CHUNK).enumerate() {
                let x: Vec<f32> = chunk.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let seeds: Vec<u64> = (0..chunk.len())
                    .map(|j| mix_seed(&[seed, 4, epoch as u64, b as u64, (c * CHUNK + j) as u64]))
                    .collect();
                let cache = net.forward_batch(&x, chunk.len(), Some(&seeds))?;
                correct += count_correct(cache.probabilities(), &y);
                loss_sum += net.backward(&cache, &y, scale, &mut grads)? as f64;
            }
            if !loss_sum.is_finite() {
                return Err(Error::NanLoss { epoch });
            }
            step += 1;
            for (p, (g, (sw, sb))) in net.params_mut().iter_mut().zip(grads.iter().zip(states.iter_mut())) {
                if p.is_empty() {
                    continue;
                }
                adamax_step(&mut p.weights, &g.weights, sw, step, &adamax).map_err(|_| Error::NanLoss { epoch })?;
                adamax_step(&mut p.biases, &g.biases, sb, step, &adamax).map_err(|_| Error::NanLoss { epoch })?;
            }
        }
        let (val_loss, val_correct) = evaluate(&net, inputs, labels, &val_idx)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            val_loss,
            val_accuracy: if val_idx.is_empty() {
                f64::NAN
            } else {
                val_correct as f64 / val_idx.len() as f64
            },
        };
        if stats.train_loss.is_nan() || stats.val_loss.is_nan() && !val_idx.is_empty() {
            return Err(Error::NanLoss { epoch });
        }
        log::debug!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            stats.train_loss,
            stats.train_accuracy,
            stats.val_loss,
            stats.val_accuracy
        );
        trace.push(stats);
    }

    Ok(TrainedModel {
        model: CnnModel::from_network(net, seed),
        trace,
    })
}

fn count_correct(probs: &[f32], labels: &[usize]) -> usize {
    probs
        .chunks_exact(2)
        .zip(labels)
        .filter(|(p, &l)| usize::from(p[1] > p[0]) == l)
        .count()
}

/// Eval-mode mean cross-entropy and correct count over `idx`.
fn evaluate(net: &Network<f32>, inputs: &[Vec<f32>], labels: &[usize], idx: &[usize]) -> Result<(f64, usize)> {
    if idx.is_empty() {
        return Ok((f64::NAN, 0));
    }
    let mut loss = 0.0f64;
    let mut correct = 0;
    for chunk in idx.chunks(CHUNK) {
        let x: Vec<f32> = chunk.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let cache = net.forward_batch(&x, chunk.len(), None)?;
        let p = cache.probabilities();
        correct += count_correct(p, &y);
        for (row, &l) in p.chunks_exact(2).zip(&y) {
            loss -= (row[l].max(f32::MIN_POSITIVE) as f64).ln();
        }
    }
    Ok((loss / idx.len() as f64, correct))
}
