use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::costmodel::{flops_active, flops_baseline, policy_cost};
use crate::error::{Error, Result};
use crate::numerics::kernels::argmax;
use crate::numerics::{Bucket, FlopCounter, Tape};
use crate::par::Execution;
use crate::policy::{apply_stochastic_recovery, motion_input, rule_based_mask, select_cache_mask, PolicyNet};
use crate::rng;
use crate::scenegen::{flow_cost, Episode};
use crate::transformer::{LayerKVCache, Transformer};

/// How a condition picks the rows to recompute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PolicyKind {
    /// Full recompute every step.
    Baseline,
    /// Lowest mean flow magnitude is cached.
    RuleBased,
    /// Learned selector, with the predictor's ratio unless one is forced.
    Learned,
}

/// One evaluated policy configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Condition {
    pub name: String,
    pub kind: PolicyKind,
    /// Forced cache ratio; `None` lets the predictor choose.
    pub ratio: Option<f64>,
    pub recovery: bool,
}

impl Condition {
    pub fn baseline() -> Self {
        Condition {
            name: "baseline".into(),
            kind: PolicyKind::Baseline,
            ratio: Some(0.0),
            recovery: false,
        }
    }

    pub fn rule_based(ratio: f64) -> Self {
        Condition {
            name: "rule_based".into(),
            kind: PolicyKind::RuleBased,
            ratio: Some(ratio),
            recovery: false,
        }
    }

    pub fn learned(name: &str, ratio: Option<f64>, recovery: bool) -> Self {
        Condition {
            name: name.into(),
            kind: PolicyKind::Learned,
            ratio,
            recovery,
        }
    }

    fn validate(&self, policy: Option<&PolicyNet>) -> Result<()> {
        if let Some(r) = self.ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("condition `{}`: ratio {r} outside [0, 1)", self.name)));
            }
        }
        if self.kind == PolicyKind::Learned && policy.is_none() {
            return Err(Error::config(format!("condition `{}` needs a policy checkpoint", self.name)));
        }
        if self.kind == PolicyKind::Learned && self.ratio.is_none() && policy.is_some_and(|p| p.config.ratios.is_empty()) {
            return Err(Error::config("adaptive condition needs a non-empty ratio set"));
        }
        Ok(())
    }
}

/// What one inference step did.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub prediction: usize,
    /// Selected cache ratio; `None` at an episode's first step.
    pub ratio: Option<f64>,
    pub n_act: usize,
    /// Closed-form cost of the step: `L·C` for the active rows plus the
    /// policy cost when a policy ran.
    pub analytic_flops: u64,
    pub measured: FlopCounter,
}

/// Steps one condition through episodes, carrying the KV cache.
pub struct Runner<'a> {
    model: &'a Transformer,
    policy: Option<&'a PolicyNet>,
    condition: &'a Condition,
    rng: ChaCha8Rng,
    cache: Option<LayerKVCache>,
    policy_flops: u64,
    flow_flops: u64,
}

impl<'a> Runner<'a> {
    pub fn new(model: &'a Transformer, policy: Option<&'a PolicyNet>, condition: &'a Condition, seed: u64) -> Result<Self> {
        condition.validate(policy)?;
        let c = model.config();
        let pcfg = policy.map(|p| p.config.clone()).unwrap_or_default();
        Ok(Runner {
            model,
            policy,
            condition,
            rng: rng::stream(seed, rng::salt::RECOVERY),
            cache: None,
            policy_flops: policy_cost(&pcfg, c.height, c.width),
            flow_flops: flow_cost(c.height, c.width, pcfg.flow_block, pcfg.flow_radius),
        })
    }

    /// Runs step `t` of `ep`; `t = 0` starts a new episode with a full
    /// forward.
    pub fn step(&mut self, ep: &Episode, t: usize) -> Result<StepRecord> {
        let c = self.model.config();
        let (n, layers) = (c.tokens(), c.layers as u64);
        let frame = ep.frames[t].to_tensor();
        let prev = if t == 0 { None } else { self.cache.as_ref() };
        let Some(prev) = prev.filter(|_| self.condition.kind != PolicyKind::Baseline) else {
            let out = self.model.step(&frame, None, None, t, true)?;
            let rec = StepRecord {
                prediction: out.prediction(),
                ratio: (t > 0).then_some(0.0),
                n_act: n,
                analytic_flops: layers * flops_baseline(n, c.dim, c.ffn),
                measured: out.flops.unwrap_or_default(),
            };
            self.cache = Some(out.cache);
            return Ok(rec);
        };

        let mut extra = FlopCounter::new();
        let pcfg = self.policy.map(|p| p.config.clone()).unwrap_or_default();
        let (ratio, mask, overhead) = match self.condition.kind {
            PolicyKind::RuleBased => {
                let r = self.condition.ratio.unwrap_or(0.0);
                let (_, flow) = motion_input(Some(&ep.frames[t - 1]), &ep.frames[t], &pcfg, ep.flow_scale())?;
                extra.add_elementwise(Bucket::Flow, self.flow_flops);
                (r, rule_based_mask(&flow, r, c.patch)?, self.flow_flops)
            }
            _ => {
                let policy = self.policy.expect("validated");
                let (v, _) = motion_input(Some(&ep.frames[t - 1]), &ep.frames[t], &pcfg, ep.flow_scale())?;
                extra.add_elementwise(Bucket::Flow, self.flow_flops);
                let mut tape = Tape::inference().with_counting();
                let p = policy.bind(&mut tape, &[]);
                let vv = tape.constant(v);
                let scores = policy.selector_forward(&mut tape, &p, vv)?;
                let r = match self.condition.ratio {
                    Some(r) => r,
                    None => {
                        let logits = policy.predictor_forward(&mut tape, &p, vv)?;
                        pcfg.ratios[argmax(tape.value(logits).data())]
                    }
                };
                let mut mask = select_cache_mask(tape.value(scores).data(), r, n)?;
                if self.condition.recovery {
                    mask = apply_stochastic_recovery(&mask, pcfg.p_recover, &mut self.rng)?;
                }
                extra.merge(tape.flops()?);
                (r, mask, self.policy_flops)
            }
        };
        let out = if mask.k == 0 {
            self.model.step(&frame, None, Some(prev), t, true)?
        } else {
            self.model.step(&frame, Some(&mask.hard), Some(prev), t, true)?
        };
        let mut measured = out.flops.clone().unwrap_or_default();
        measured.merge(&extra);
        let rec = StepRecord {
            prediction: out.prediction(),
            ratio: Some(ratio),
            n_act: out.n_act,
            analytic_flops: layers * flops_active(out.n_act, n, c.dim, c.ffn) + overhead,
            measured,
        };
        self.cache = Some(out.cache);
        Ok(rec)
    }
}

/// Aggregate of one condition over an episode set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub correct: usize,
    pub steps: usize,
    /// Mean selected ratio over policy-driven steps (`t ≥ 1`).
    pub mean_ratio: f64,
    /// Per-step means.
    pub analytic_flops: f64,
    pub measured_flops: f64,
    /// Per episode: correct predictions and the selected ratios.
    pub per_episode: Vec<(usize, Vec<f64>)>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.steps.max(1) as f64
    }
}

/// Runs `condition` over every episode (episodes in parallel, each with its
/// own cache and recovery stream).
pub fn evaluate(
    model: &Transformer,
    policy: Option<&PolicyNet>,
    condition: &Condition,
    episodes: &[Episode],
    seed: u64,
    exec: Execution,
) -> Result<Evaluation> {
    let per = exec.try_map(episodes, |_, ep| -> Result<(usize, Vec<f64>, u64, u64, usize)> {
        let mut runner = Runner::new(model, policy, condition, rng::mix(seed, ep.seed))?;
        let (mut correct, mut ratios, mut analytic, mut measured) = (0, Vec::new(), 0u64, 0u64);
        for t in 0..ep.len() {
            let rec = runner.step(ep, t)?;
            correct += usize::from(rec.prediction == ep.label(t));
            ratios.extend(rec.ratio);
            analytic += rec.analytic_flops;
            measured += rec.measured.total_flops();
        }
        Ok((correct, ratios, analytic, measured, ep.len()))
    })?;
    let steps: usize = per.iter().map(|p| p.4).sum();
    let all_ratios: Vec<f64> = per.iter().flat_map(|p| p.1.iter().copied()).collect();
    Ok(Evaluation {
        correct: per.iter().map(|p| p.0).sum(),
        steps,
        mean_ratio: all_ratios.iter().sum::<f64>() / all_ratios.len().max(1) as f64,
        analytic_flops: per.iter().map(|p| p.2 as f64).sum::<f64>() / steps.max(1) as f64,
        measured_flops: per.iter().map(|p| p.3 as f64).sum::<f64>() / steps.max(1) as f64,
        per_episode: per.into_iter().map(|p| (p.0, p.1)).collect(),
    })
}
