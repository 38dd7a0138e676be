use std::path::Path;

use serde::{Deserialize, Serialize};

use super::runner::{evaluate, Condition, Evaluation, PolicyKind};
use super::wallclock::wallclock;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyNet;
use crate::rng;
use crate::scenegen::Episode;
use crate::training::{episode_set, load_backbone, load_policy};
use crate::transformer::Transformer;

/// One CSV row per evaluated condition.
///
/// Header: `policy,ratio,accuracy,mean_ratio,analytic_flops,measured_flops,
/// wallclock_ms,seed`. `ratio` is the forced cache ratio (empty when the
/// predictor chooses); `mean_ratio` is the mean selected ratio over steps
/// `t ≥ 1`; FLOP columns are per-step means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: String,
    pub ratio: Option<f64>,
    pub accuracy: f64,
    pub mean_ratio: f64,
    pub analytic_flops: f64,
    pub measured_flops: f64,
    pub wallclock_ms: f64,
    pub seed: u64,
}

impl BenchRow {
    fn new(cond: &Condition, e: &Evaluation, wallclock_ms: f64, seed: u64) -> Self {
        BenchRow {
            policy: cond.name.clone(),
            ratio: cond.ratio,
            accuracy: e.accuracy(),
            mean_ratio: e.mean_ratio,
            analytic_flops: e.analytic_flops,
            measured_flops: e.measured_flops,
            wallclock_ms,
            seed,
        }
    }
}

/// Backbone and policy checkpoints plus the held-out episode set shared by
/// every condition of a report.
pub struct Fixture {
    pub model: Transformer,
    pub policy: PolicyNet,
    pub episodes: Vec<Episode>,
}

impl Fixture {
    /// Loads both checkpoints from `cfg.out_dir`; a missing one is a
    /// configuration error naming the path.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let missing = |e: Error| match e {
            Error::MissingFile(p) => Error::Config(format!("missing checkpoint {}", p.display())),
            e => e,
        };
        let model = load_backbone(&cfg.backbone_path()).map_err(missing)?;
        let mut policy = load_policy(&cfg.policy_path()).map_err(missing)?;
        policy.adopt_settings(&cfg.policy)?;
        let episodes = episode_set(
            &cfg.scene,
            cfg.seed,
            rng::salt::HELDOUT_DATA,
            cfg.data.heldout_episodes,
            cfg.execution(),
        )?;
        Ok(Fixture { model, policy, episodes })
    }

    pub fn evaluate(&self, cfg: &RunConfig, cond: &Condition) -> Result<Evaluation> {
        let policy = (cond.kind == PolicyKind::Learned).then_some(&self.policy);
        evaluate(&self.model, policy, cond, &self.episodes, rng::mix(cfg.seed, rng::salt::BENCH), cfg.execution())
    }

    fn rows(&self, cfg: &RunConfig, conditions: &[Condition]) -> Result<Vec<BenchRow>> {
        let evals = conditions
            .iter()
            .map(|c| self.evaluate(cfg, c))
            .collect::<Result<Vec<_>>>()?;
        let timing = wallclock(
            &self.model,
            Some(&self.policy),
            conditions,
            &self.episodes,
            cfg.bench.warmup_steps,
            cfg.bench.wallclock_steps,
            cfg.seed,
        )?;
        Ok(conditions
            .iter()
            .zip(&evals)
            .zip(timing)
            .map(|((c, e), ms)| BenchRow::new(c, e, ms, cfg.seed))
            .collect())
    }
}

/// The benchmark conditions: no caching, the flow-magnitude rule, the
/// learned policy at a forced ratio (selector only), adaptive without
/// recovery (+predictor) and the full adaptive policy with recovery.
pub fn bench_conditions(cfg: &RunConfig) -> Vec<Condition> {
    let r = cfg.bench.fixed_ratio;
    vec![
        Condition::baseline(),
        Condition::rule_based(r),
        Condition::learned("lac_fixed", Some(r), false),
        Condition::learned("lac_no_recovery", None, false),
        Condition::learned("lac", None, true),
    ]
}

pub fn run_benchmark(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let fx = Fixture::load(cfg)?;
    fx.rows(cfg, &bench_conditions(cfg))
}

/// Accuracy and latency of the learned selector and the flow-magnitude rule
/// at every forced ratio of `ratios`.
pub fn sweep_ratio(cfg: &RunConfig, ratios: &[f64]) -> Result<Vec<BenchRow>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::config(format!("sweep ratio {r} outside [0, 1)")));
    }
    let fx = Fixture::load(cfg)?;
    let conditions: Vec<Condition> = ratios
        .iter()
        .flat_map(|&r| [Condition::learned("learned", Some(r), false), Condition::rule_based(r)])
        .collect();
    fx.rows(cfg, &conditions)
}

pub fn write_rows(path: &Path, rows: &[BenchRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a bench CSV; malformed records report their line number.
pub fn read_rows(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| parse_error(&e, 1))?.clone();
    let expected = ["policy", "ratio", "accuracy", "mean_ratio", "analytic_flops", "measured_flops", "wallclock_ms", "seed"];
    if headers.iter().ne(expected) {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_error(&e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: BenchRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn parse_error(e: &csv::Error, fallback: u64) -> Error {
    Error::Parse {
        line: e.position().map_or(fallback, |p| p.line()),
        reason: e.to_string(),
    }
}
