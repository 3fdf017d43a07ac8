use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activations, NetworkModel, PreparedSample, TrainingMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Stop after the first epoch whose training accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 32, lr: 0.01, momentum: 0.9, seed: 0, stop_at_accuracy: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Accuracy on the training set after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// First epoch (1-based) whose accuracy reaches `target`.
    pub fn epochs_to_accuracy(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.accuracy >= target).map(|e| e.epoch)
    }
}

/// Fraction of samples whose argmax class equals the label.
pub fn accuracy(model: &NetworkModel, data: &[PreparedSample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut act = Activations::new(&model.geo);
    let hits = data
        .iter()
        .filter(|s| {
            model.forward_into(&s.x, &mut act);
            u8::from(act.probs[1] > act.probs[0]) == s.y
        })
        .count();
    hits as f64 / data.len() as f64
}

pub fn train(model: &NetworkModel, data: &[PreparedSample], cfg: &TrainConfig) -> Result<(NetworkModel, TrainHistory)> {
    train_masked(model, data, cfg, None)
}

/// Minibatch SGD with classical momentum. Entries where `keep` is false are
/// held at zero.
pub fn train_masked(
    model: &NetworkModel,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    keep: Option<&[bool]>,
) -> Result<(NetworkModel, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let expected = model.input_len * super::CHANNELS;
    if let Some(bad) = data.iter().find(|s| s.x.len() != expected) {
        return Err(Error::Shape { expected: expected.to_string(), got: bad.x.len().to_string() });
    }
    if let Some(k) = keep {
        if k.len() != model.n_params() {
            return Err(Error::Shape { expected: model.n_params().to_string(), got: k.len().to_string() });
        }
    }

    let mut m = model.clone();
    if let Some(k) = keep {
        m.params.iter_mut().zip(k).filter(|(_, &k)| !k).for_each(|(v, _)| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = vec![0.0; m.n_params()];
    let mut grad = vec![0.0; m.n_params()];
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &data[i]));
            let loss = m.loss_and_grad_into(&batch, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFault { epoch, message: format!("loss diverged ({loss})") });
            }
            for i in 0..velocity.len() {
                velocity[i] = cfg.momentum * velocity[i] - cfg.lr * grad[i];
                m.params[i] += velocity[i];
            }
            if let Some(k) = keep {
                for (i, _) in k.iter().enumerate().filter(|(_, &k)| !k) {
                    m.params[i] = 0.0;
                    velocity[i] = 0.0;
                }
            }
            loss_sum += loss;
            batches += 1;
        }
        if m.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingFault { epoch, message: "parameters became non-finite".into() });
        }
        let acc = accuracy(&m, data);
        history.epochs.push(EpochStats { epoch, loss: loss_sum / batches as f64, accuracy: acc });
        if cfg.stop_at_accuracy.is_some_and(|t| acc >= t) {
            break;
        }
    }

    if let Some(last) = history.epochs.last() {
        m.training = Some(TrainingMeta {
            epochs: last.epoch,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            seed: cfg.seed,
            samples: data.len(),
            final_loss: last.loss,
            final_accuracy: last.accuracy,
        });
    }
    Ok((m, history))
}
