//! Minibatch AdamW training with linear warm-up and dev macro-F1 model
//! selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    backward, decode_label, forward, label_levels, loss_with_gradient, FrameSequence, HeadMode,
    HeadParameters, HeadWeights,
};
use crate::error::{Error, Result};
use crate::metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub mode: HeadMode,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub attn_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-4,
            warmup_steps: 600,
            seed: 0,
            mode: HeadMode::Classification,
            batch_size: 8,
            weight_decay: 0.01,
            attn_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
    /// Learning rate at the last step of the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the highest dev macro-F1 (earliest on ties).
    pub best: HeadParameters,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: HeadWeights,
    second: HeadWeights,
    steps: i32,
}

impl AdamW {
    pub fn new(like: &HeadWeights, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: HeadWeights::zeros_like(like),
            second: HeadWeights::zeros_like(like),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut HeadWeights, grads: &HeadWeights, lr: f64) {
        self.steps += 1;
        let bias1 = 1.0 - self.beta1.powi(self.steps);
        let bias2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.slices_mut())
            .zip(self.second.slices_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                p[i] -= lr * wd * p[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Summed per-example losses and batch-mean gradients, accumulated in batch
/// order.
pub fn batch_loss_and_gradients(
    params: &HeadParameters,
    batch: &[&FrameSequence],
) -> Result<(Vec<f64>, HeadWeights)> {
    let mut grads = HeadWeights::zeros_like(&params.weights);
    let mut losses = Vec::with_capacity(batch.len());
    for seq in batch {
        let target = seq
            .label()
            .ok_or_else(|| Error::InvalidConfig("training sequence without label".into()))?;
        let cache = forward(seq, params)?;
        let (loss, upstream) = loss_with_gradient(cache.output(), target, params)?;
        let g = backward(params, &cache, &upstream)?;
        grads.scale_add(1.0 / batch.len() as f64, &g);
        losses.push(loss);
    }
    Ok((losses, grads))
}

/// Dev macro-F1: regression outputs are snapped to the level grid,
/// classification uses the arg-max level.
pub fn dev_macro_f1(params: &HeadParameters, dev: &[FrameSequence]) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = dev
        .par_iter()
        .map(|seq| {
            let label = seq
                .label()
                .ok_or_else(|| Error::InvalidConfig("dev sequence without label".into()))?;
            let cache = forward(seq, params)?;
            Ok((decode_label(cache.output(), params), label))
        })
        .collect::<Result<_>>()?;
    let (pred, refs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    metrics::macro_f1(&pred, &refs)
}

fn warmup_rate(config: &TrainConfig, step: usize) -> f64 {
    if config.warmup_steps == 0 {
        config.learning_rate
    } else {
        config.learning_rate * ((step + 1) as f64 / config.warmup_steps as f64).min(1.0)
    }
}

pub fn train(
    train: &[FrameSequence],
    dev: &[FrameSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidConfig(
            "batch size and epochs must be positive".into(),
        ));
    }
    if config.learning_rate.is_nan()
        || config.learning_rate < 0.0
        || config.weight_decay.is_nan()
        || config.weight_decay < 0.0
    {
        return Err(Error::InvalidConfig(
            "learning rate and weight decay must be non-negative".into(),
        ));
    }
    label_levels(dev)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = HeadParameters::initialize(&mut rng, train, config.attn_dim, config.mode)?;
    let mut optimizer = AdamW::new(&params.weights, config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, HeadParameters)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut example_loss = vec![0.0; train.len()];
        let mut lr = warmup_rate(config, step);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FrameSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let (losses, grads) = batch_loss_and_gradients(&params, &batch)?;
            for (&i, l) in chunk.iter().zip(losses) {
                example_loss[i] = l;
            }
            lr = warmup_rate(config, step);
            optimizer.step(&mut params.weights, &grads, lr);
            step += 1;
        }
        // summed in dataset order so the value does not depend on the shuffle
        let train_loss = example_loss.iter().sum::<f64>() / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let f1 = dev_macro_f1(&params, dev)?;
        log::info!("epoch {epoch}: train loss {train_loss:.6}, dev macro-F1 {f1:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_macro_f1: f1,
            learning_rate: lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
