use rand::seq::SliceRandom;

use super::data::Grads;
use crate::config::Stage1Config;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::par::Execution;
use crate::policy::{motion_input, Part, PolicyNet};
use crate::rng;
use crate::scenegen::Episode;
use crate::transformer::Transformer;

/// One Stage-I regression pair: `V_t` and the backbone's saliency `S_VLA`.
#[derive(Debug, Clone)]
pub struct AlignSample {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Saliency targets from full forwards of the frozen backbone, one per
/// step of every episode.
pub fn alignment_samples(
    model: &Transformer,
    policy: &PolicyNet,
    episodes: &[Episode],
    exec: Execution,
) -> Result<Vec<AlignSample>> {
    let per_episode = exec.try_map(episodes, |_, ep| -> Result<Vec<AlignSample>> {
        (0..ep.len())
            .map(|t| {
                let prev = t.checked_sub(1).map(|p| &ep.frames[p]);
                let (input, _) = motion_input(prev, &ep.frames[t], &policy.config, ep.flow_scale())?;
                let out = model.full_forward(&ep.frames[t].to_tensor(), None, t)?;
                Ok(AlignSample {
                    input,
                    target: Tensor::vector(out.saliency()),
                })
            })
            .collect()
    })?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Per-token mean squared error of the selector against the targets.
pub fn alignment_mse(policy: &PolicyNet, samples: &[AlignSample], exec: Execution) -> Result<f64> {
    let errs = exec.try_map(samples, |_, s| -> Result<f64> {
        let scores = policy.scores(&s.input)?;
        Ok(scores
            .iter()
            .zip(s.target.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / scores.len() as f64)
    })?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

fn sample_grad(policy: &PolicyNet, s: &AlignSample) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let p = policy.bind(&mut tape, &[Part::Selector]);
    let v = tape.constant(s.input.clone());
    let scores = policy.selector_forward(&mut tape, &p, v)?;
    let loss = tape.mse(scores, s.target.clone())?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0] as f64, Grads::from_tape(&tape, &grads, &p)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Report {
    pub initial_mse: f64,
    /// Alignment MSE over all samples after each epoch.
    pub epoch_mse: Vec<f64>,
}

/// Regresses the selector onto the frozen backbone's attention saliency.
/// The backbone digest is checked after every epoch.
pub fn stage1_align(
    policy: &mut PolicyNet,
    model: &Transformer,
    episodes: &[Episode],
    cfg: &Stage1Config,
    seed: u64,
    exec: Execution,
) -> Result<Stage1Report> {
    let digest = model.params().digest();
    let samples = alignment_samples(model, policy, episodes, exec)?;
    let initial_mse = alignment_mse(policy, &samples, exec)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut shuffle = rng::stream(seed, rng::salt::STAGE1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch) {
            let pol: &PolicyNet = policy;
            let results = exec.try_map(batch, |_, &i| sample_grad(pol, &samples[i]))?;
            let mut acc = Grads::default();
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Training {
                        param: "align".into(),
                        reason: format!("alignment loss became {loss} in epoch {epoch}"),
                    });
                }
                acc.add(g);
            }
            acc.scale(1.0 / batch.len() as f32);
            adam.step(&mut policy.params, &acc.tensors)?;
        }
        if model.params().digest() != digest {
            return Err(Error::Integrity(format!("backbone weights changed during Stage I epoch {epoch}")));
        }
        epoch_mse.push(alignment_mse(policy, &samples, exec)?);
    }
    Ok(Stage1Report { initial_mse, epoch_mse })
}
