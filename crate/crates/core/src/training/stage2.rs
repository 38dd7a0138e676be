use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::data::Grads;
use super::LossBundle;
use crate::config::Stage2Config;
use crate::error::{Error, Result};
use crate::numerics::kernels::argmax;
use crate::numerics::{Adam, AdamConfig, Tape};
use crate::par::Execution;
use crate::policy::{gumbel_softmax, mixed_soft_mask, motion_input, ratio_loss, sample_gumbel, Part, PolicyNet};
use crate::rng;
use crate::scenegen::Episode;
use crate::transformer::{Recompute, Transformer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Options {
    pub lambda: f64,
    /// Gumbel-Softmax temperature `τ`.
    pub tau: f64,
    /// Sample fresh Gumbel noise every step; off gives the deterministic
    /// relaxation.
    pub gumbel_noise: bool,
    /// Cut the selector scores off the tape before the soft masks.
    pub detach_scores: bool,
}

/// Mean losses, summed gradients and the choices made over one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    /// Means over the policy-driven steps `1..T`.
    pub loss: LossBundle,
    /// Gradients summed over those steps.
    pub grads: Grads,
    pub steps: usize,
    /// Selected ratio per policy-driven step.
    pub ratios: Vec<f64>,
    pub correct: usize,
}

/// Rolls out one episode: a full forward at step 0, then per step the
/// predictor's Gumbel-Softmax decision, the selector's scores, the hard
/// mask in the forward pass and the mixed soft mask in the backward pass.
/// The cache carried to the next step is the hard-mask result, detached.
pub fn stage2_episode(
    model: &Transformer,
    policy: &PolicyNet,
    ep: &Episode,
    opts: &Stage2Options,
    noise_seed: u64,
) -> Result<EpisodeOutcome> {
    let ratios = policy.config.ratios.clone();
    let tau_s = policy.config.tau_s;
    let mut noise_rng = rng::stream(noise_seed, rng::salt::GUMBEL);
    let mut cache = model.full_forward(&ep.frames[0].to_tensor(), None, 0)?.cache;
    let mut loss = LossBundle::default();
    let mut grads = Grads::default();
    let mut chosen = Vec::with_capacity(ep.len());
    let mut correct = 0;
    for t in 1..ep.len() {
        let (v, _) = motion_input(Some(&ep.frames[t - 1]), &ep.frames[t], &policy.config, ep.flow_scale())?;
        let mut tape = Tape::new();
        let pp = policy.bind(&mut tape, &[Part::Selector, Part::Predictor]);
        let bp = model.params().bind(&mut tape, false);
        let vv = tape.constant(v);
        let logits = policy.predictor_forward(&mut tape, &pp, vv)?;
        let noise = opts.gumbel_noise.then(|| sample_gumbel(&mut noise_rng, ratios.len()));
        let decision = gumbel_softmax(&mut tape, logits, opts.tau, noise.as_deref())?;
        let mut scores = policy.selector_forward(&mut tape, &pp, vv)?;
        if opts.detach_scores {
            scores = tape.detach(scores);
        }
        let (mask, m) = mixed_soft_mask(&mut tape, scores, &decision, &ratios, tau_s)?;
        let frame = ep.frames[t].to_tensor();
        let graph = model.forward_graph(&mut tape, &bp, &frame, Some(&cache), Recompute::Blend(m))?;
        let label = ep.label(t);
        let task = tape.cross_entropy(graph.logits, label)?;
        let ratio = ratio_loss(&mut tape, decision.soft, &ratios)?;
        let weighted = tape.scale(ratio, opts.lambda as f32);
        let total = tape.add(task, weighted)?;
        let g = tape.backward(total)?;
        if let Some((name, _)) = bp.iter().find(|&(_, v)| g.get(v).is_some()) {
            return Err(Error::Integrity(format!("gradient reached frozen backbone weight `{name}`")));
        }
        let step = LossBundle::stage2(
            tape.value(task).data()[0] as f64,
            tape.value(ratio).data()[0] as f64,
            opts.lambda,
        );
        if !step.total.is_finite() {
            return Err(Error::Training {
                param: "stage2".into(),
                reason: format!("loss became {} at step {t} of episode {}", step.total, ep.seed),
            });
        }
        loss.accumulate(&step);
        grads.add(&Grads::from_tape(&tape, &g, &pp));
        chosen.push(ratios[decision.index]);
        if argmax(tape.value(graph.logits).data()) == label {
            correct += 1;
        }
        cache = model.collect(&tape, &graph, Some(&cache), &mask.hard, t).cache;
    }
    let steps = ep.len().saturating_sub(1);
    Ok(EpisodeOutcome {
        loss: loss.scaled(1.0 / steps.max(1) as f64),
        grads,
        steps,
        ratios: chosen,
        correct,
    })
}

/// One optimisation step's worth of rollouts: mean losses, gradients
/// averaged over every policy-driven step of every episode in `batch`, and
/// the ratios selected along the way.
pub fn stage2_step(
    model: &Transformer,
    policy: &PolicyNet,
    batch: &[&Episode],
    opts: &Stage2Options,
    seed: u64,
    exec: Execution,
) -> Result<(LossBundle, Grads, Vec<f64>)> {
    let outcomes = exec.try_map(batch, |_, ep| stage2_episode(model, policy, ep, opts, rng::mix(seed, ep.seed)))?;
    let mut loss = LossBundle::default();
    let mut grads = Grads::default();
    let mut ratios = Vec::new();
    let mut steps = 0;
    for o in &outcomes {
        loss.accumulate(&o.loss);
        grads.add(&o.grads);
        ratios.extend_from_slice(&o.ratios);
        steps += o.steps;
    }
    grads.scale(1.0 / steps.max(1) as f32);
    Ok((loss.scaled(1.0 / outcomes.len().max(1) as f64), grads, ratios))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Report {
    /// Mean losses per epoch.
    pub epochs: Vec<LossBundle>,
    /// Mean selected ratio per epoch.
    pub mean_ratio: Vec<f64>,
}

/// Joint selector/predictor training against the frozen backbone with `τ`
/// annealed linearly over all optimiser steps. `on_epoch` runs after each
/// epoch (for metric logging).
pub fn stage2_train(
    policy: &mut PolicyNet,
    model: &Transformer,
    episodes: &[Episode],
    cfg: &Stage2Config,
    seed: u64,
    exec: Execution,
    mut on_epoch: impl FnMut(usize, &LossBundle, &PolicyNet) -> Result<()>,
) -> Result<Stage2Report> {
    let digest = model.params().digest();
    let mut adam_pred = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut adam_sel = Adam::new(AdamConfig { lr: cfg.selector_lr, ..AdamConfig::default() });
    let mut shuffle = rng::stream(seed, rng::salt::STAGE2);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let total = (episodes.len().div_ceil(cfg.batch) * cfg.epochs).max(2);
    let mut step = 0;
    let mut report = Stage2Report {
        epochs: Vec::new(),
        mean_ratio: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = LossBundle::default();
        let mut ratio_sum = 0.0;
        let mut ratio_count = 0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let opts = Stage2Options {
                lambda: cfg.lambda,
                tau: policy.config.tau_at(step as f64 / (total - 1) as f64),
                gumbel_noise: true,
                detach_scores: false,
            };
            let batch: Vec<&Episode> = chunk.iter().map(|&i| &episodes[i]).collect();
            let (loss, grads, ratios) = stage2_step(model, policy, &batch, &opts, rng::mix(seed, step as u64), exec)?;
            let (sel, pred): (BTreeMap<_, _>, BTreeMap<_, _>) =
                grads.tensors.into_iter().partition(|(name, _)| name.starts_with(Part::Selector.prefix()));
            adam_sel.step(&mut policy.params, &sel)?;
            adam_pred.step(&mut policy.params, &pred)?;
            ratio_sum += ratios.iter().sum::<f64>();
            ratio_count += ratios.len();
            epoch_loss.accumulate(&loss);
            batches += 1;
            step += 1;
        }
        if model.params().digest() != digest {
            return Err(Error::Integrity(format!("backbone weights changed during Stage II epoch {epoch}")));
        }
        let mean = epoch_loss.scaled(1.0 / batches.max(1) as f64);
        on_epoch(epoch, &mean, policy)?;
        report.epochs.push(mean);
        report.mean_ratio.push(ratio_sum / ratio_count.max(1) as f64);
    }
    Ok(report)
}
