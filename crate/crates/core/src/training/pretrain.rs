use rand::seq::SliceRandom;

use super::data::Grads;
use crate::config::PretrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::par::Execution;
use crate::rng;
use crate::scenegen::Episode;
use crate::transformer::{Recompute, Transformer};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

fn frame_grad(model: &Transformer, frame: &Tensor<f32>, label: usize) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let g = model.forward_graph(&mut tape, &p, frame, None, Recompute::All)?;
    let loss = tape.cross_entropy(g.logits, label)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0] as f64, Grads::from_tape(&tape, &grads, &p)))
}

fn frames(episodes: &[Episode]) -> Vec<(Tensor<f32>, usize)> {
    episodes
        .iter()
        .flat_map(|ep| (0..ep.len()).map(move |t| (ep.frames[t].to_tensor(), ep.label(t))))
        .collect()
}

/// Cross-entropy training on next-cell prediction with full forwards only.
/// Frames are shuffled per epoch; the learning rate follows a cosine decay
/// down to `lr · lr_floor`.
pub fn pretrain_backbone(
    model: &mut Transformer,
    episodes: &[Episode],
    cfg: &PretrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<PretrainReport> {
    let items = frames(episodes);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle = rng::stream(seed, rng::salt::PRETRAIN);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let steps_per_epoch = items.len().div_ceil(cfg.batch);
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let m: &Transformer = model;
            let results = exec.try_map(batch, |_, &i| frame_grad(m, &items[i].0, items[i].1))?;
            let mut acc = Grads::default();
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Training {
                        param: "loss".into(),
                        reason: format!("pretraining diverged at step {step} (loss {loss})"),
                    });
                }
                sum += loss;
                acc.add(g);
            }
            acc.scale(1.0 / batch.len() as f32);
            let progress = step as f32 / total as f32;
            let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
            adam.set_lr(cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine));
            adam.step(model.params_mut(), &acc.tensors)?;
            step += 1;
        }
        epoch_losses.push(sum / items.len() as f64);
    }
    Ok(PretrainReport { epoch_losses })
}

/// Mean cross-entropy of full forwards over every frame.
pub fn dataset_loss(model: &Transformer, episodes: &[Episode], exec: Execution) -> Result<f64> {
    let items = frames(episodes);
    let losses = exec.try_map(&items, |_, (f, label)| -> Result<f64> {
        let out = model.full_forward(f, None, 0)?;
        let mx = out.logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = out.logits.iter().map(|&l| (l as f64 - mx).exp()).sum();
        Ok(mx + z.ln() - out.logits[*label] as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Top-1 next-cell accuracy of full forwards over every frame.
pub fn backbone_accuracy(model: &Transformer, episodes: &[Episode], exec: Execution) -> Result<f64> {
    let items = frames(episodes);
    let hits = exec.try_map(&items, |_, (f, label)| -> Result<bool> {
        Ok(model.full_forward(f, None, 0)?.prediction() == *label)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}
