//! Minibatch SGD with momentum, weight decay and step learning-rate decay.
//!
//! Sample order per epoch is a seeded permutation, so a run is fully
//! determined by its settings, data and initial parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, LossKind};
use crate::data::Dataset;
use crate::engine::Network;
use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Batch-norm running statistics move this far toward each batch.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
        }
    }
}

/// Epoch count and the epochs at which the learning rate is divided by 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
}

impl Schedule {
    /// Decays after 60% and 80% of the epochs.
    pub fn with_epochs(epochs: usize) -> Self {
        let at = |f: f64| (epochs as f64 * f).round() as usize;
        let mut decay_epochs: Vec<usize> = [at(0.6), at(0.8)].into_iter().filter(|&e| e > 0 && e < epochs).collect();
        decay_epochs.dedup();
        Schedule { epochs, decay_epochs }
    }

    pub fn learning_rate(&self, base: f64, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        base * 0.1f64.powi(decays as i32)
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::with_epochs(20)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.schedule.epochs == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        for (name, v) in [
            ("learning rate", o.learning_rate),
            ("momentum", o.momentum),
            ("weight decay", o.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Averaged over the epoch's minibatches, batch statistics in batch norm.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test: Evaluation,
}

/// Fraction of rows of `outputs` whose argmax (lowest index on ties)
/// equals the label.
pub fn accuracy(outputs: &[f64], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = outputs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode loss and accuracy over the whole dataset.
pub fn evaluate(net: &Network, params: &ParamVector, data: &Dataset, loss: LossKind) -> Result<Evaluation> {
    let batch = data.batch(loss);
    let outputs = autodiff::forward(net, params, &batch.inputs, batch.n)?;
    Ok(Evaluation {
        loss: autodiff::loss(&outputs, net.output_size(), &batch.targets, loss)?,
        accuracy: accuracy(&outputs, net.output_size(), &data.labels),
    })
}

/// Trains `params` in place and returns per-epoch metrics. Weight decay
/// applies to trainable parameters only.
pub fn train(
    net: &Network,
    params: &mut ParamVector,
    train_set: &Dataset,
    test_set: &Dataset,
    settings: &TrainSettings,
) -> Result<Vec<EpochMetrics>> {
    settings.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let trainable = params.layout.trainable_mask();
    let opt = &settings.optimizer;
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(settings.schedule.epochs);
    for epoch in 0..settings.schedule.epochs {
        let lr = settings.schedule.learning_rate(opt.learning_rate, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        for idx in order.chunks(opt.batch_size) {
            let batch = train_set.batch_of(idx, settings.loss);
            let step = autodiff::train_gradient(net, params, &batch, settings.loss)?;
            loss_sum += step.loss * idx.len() as f64;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            hits += accuracy(&step.outputs, net.output_size(), &labels) * idx.len() as f64;
            step.update_running_stats(params, BN_MOMENTUM);
            for (i, ((p, v), &g)) in params.values.iter_mut().zip(&mut velocity).zip(&step.grad).enumerate() {
                if !trainable[i] {
                    continue;
                }
                let g = g + opt.weight_decay * *p;
                *v = opt.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        let test = evaluate(net, params, test_set, settings.loss)?;
        let n = train_set.len() as f64;
        tracing::debug!(epoch, lr, train_loss = loss_sum / n, test_accuracy = test.accuracy, "epoch done");
        history.push(EpochMetrics {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / n,
            train_accuracy: hits / n,
            test,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_sixty_and_eighty_percent() {
        let s = Schedule::with_epochs(20);
        assert_eq!(s.decay_epochs, vec![12, 16]);
        assert_eq!(s.learning_rate(0.1, 11), 0.1);
        assert!((s.learning_rate(0.1, 12) - 0.01).abs() < 1e-15);
        assert!((s.learning_rate(0.1, 19) - 0.001).abs() < 1e-15);
        assert!(Schedule::with_epochs(1).decay_epochs.is_empty());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(accuracy(&[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 3, &[0, 1]), 1.0);
    }
}
