use std::time::Instant;

use super::runner::{Condition, Runner};
use crate::error::{Error, Result};
use crate::policy::PolicyNet;
use crate::scenegen::Episode;
use crate::transformer::Transformer;

/// Median of a non-empty sample.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median per-step latency in milliseconds for each condition.
///
/// All conditions advance through the same episode stream in lockstep on
/// the calling thread; each trial times one step of every condition, with
/// the starting condition rotated between trials. The first `warmup`
/// trials are discarded.
pub fn wallclock(
    model: &Transformer,
    policy: Option<&PolicyNet>,
    conditions: &[Condition],
    episodes: &[Episode],
    warmup: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let Some(len) = episodes.first().map(Episode::len) else {
        return Err(Error::config("wall-clock trials need at least one episode"));
    };
    if steps == 0 {
        return Err(Error::config("wall-clock trials need at least one timed step"));
    }
    let mut runners = conditions
        .iter()
        .map(|c| Runner::new(model, policy, c, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = vec![Vec::with_capacity(steps); conditions.len()];
    for i in 0..warmup + steps {
        let ep = &episodes[(i / len) % episodes.len()];
        let t = i % len;
        for j in 0..runners.len() {
            let c = (i + j) % runners.len();
            let start = Instant::now();
            let rec = runners[c].step(ep, t)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(rec);
            if i >= warmup {
                samples[c].push(ms);
            }
        }
    }
    Ok(samples.iter().map(|s| median(s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
