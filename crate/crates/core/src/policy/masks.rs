use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::scenegen::MotionField;

/// Hard recompute/reuse decision for one step (`true` = recompute).
#[derive(Debug, Clone, PartialEq)]
pub struct CacheMask {
    pub hard: Vec<bool>,
    /// Number of reused (cached) rows.
    pub k: usize,
    /// Score threshold between the `k`-th and `(k+1)`-th smallest scores;
    /// `−∞` when `k = 0` and `+∞` when `k = N`.
    pub theta: f64,
}

impl CacheMask {
    pub fn full(n: usize) -> Self {
        CacheMask {
            hard: vec![true; n],
            k: 0,
            theta: f64::NEG_INFINITY,
        }
    }

    pub fn recomputed(&self) -> usize {
        self.hard.iter().filter(|&&b| b).count()
    }

    /// Fraction of rows reused.
    pub fn ratio(&self) -> f64 {
        1.0 - self.recomputed() as f64 / self.hard.len() as f64
    }
}

/// `k_t = ⌊N·r⌋`. A tolerance of `1e-9` absorbs products such as
/// `100 × 0.29` landing just below an integer.
pub fn cached_count(n: usize, r: f64) -> usize {
    ((n as f64 * r + 1e-9).floor() as usize).min(n)
}

/// Reuses the `k` lowest-scoring rows; equal scores reuse the lower index
/// first.
pub fn rank_mask<T: Scalar>(scores: &[T], k: usize) -> Result<CacheMask> {
    let n = scores.len();
    if k > n {
        return Err(Error::contract(format!("cannot cache {k} of {n} tokens")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].as_f64().total_cmp(&scores[b].as_f64()).then(a.cmp(&b)));
    let mut hard = vec![true; n];
    for &i in &order[..k] {
        hard[i] = false;
    }
    let theta = match k {
        0 => f64::NEG_INFINITY,
        k if k == n => f64::INFINITY,
        k => 0.5 * (scores[order[k - 1]].as_f64() + scores[order[k]].as_f64()),
    };
    Ok(CacheMask { hard, k, theta })
}

/// Reuses the `⌊N·r⌋` lowest-scoring tokens.
pub fn select_cache_mask<T: Scalar>(scores: &[T], r: f64, n: usize) -> Result<CacheMask> {
    if scores.len() != n {
        return Err(Error::shape("select_cache_mask", &[scores.len()], &[n]));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::contract(format!("cache ratio {r} outside [0, 1)")));
    }
    rank_mask(scores, cached_count(n, r))
}

/// Independently flips each reused row to recompute with probability `p`.
pub fn apply_stochastic_recovery(mask: &CacheMask, p: f64, rng: &mut impl Rng) -> Result<CacheMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("recovery probability {p} outside [0, 1]")));
    }
    let mut out = mask.clone();
    for b in out.hard.iter_mut().filter(|b| !**b) {
        *b = rng.random_bool(p);
    }
    out.k = out.hard.iter().filter(|&&b| !b).count();
    Ok(out)
}

/// Flow-magnitude heuristic: reuses the `⌊N·r⌋` tokens with the lowest
/// mean flow magnitude over their `patch×patch` pixels.
pub fn rule_based_mask(flow: &MotionField, r: f64, patch: usize) -> Result<CacheMask> {
    let (h, w) = (flow.height, flow.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("patch {patch} does not divide {h}×{w}")));
    }
    let gw = w / patch;
    let n = (h / patch) * gw;
    let mut mags = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            mags[(y / patch) * gw + x / patch] += flow.magnitude(y * w + x) as f64;
        }
    }
    let area = (patch * patch) as f64;
    mags.iter_mut().for_each(|m| *m /= area);
    select_cache_mask(&mags, r, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn select_examples() {
        let m = select_cache_mask(&[0.9, 0.2, 0.1, 0.8], 0.5, 4).unwrap();
        assert_eq!(m.k, 2);
        assert_eq!(m.hard, vec![true, false, false, true]);
        assert!((m.theta - 0.5).abs() < 1e-12);
        assert_eq!(select_cache_mask(&[0.3; 6], 0.0, 6).unwrap().hard, vec![true; 6]);
        assert_eq!(cached_count(256, 0.4), 102);
        assert_eq!(cached_count(64, 0.4), 25);
        assert_eq!(cached_count(100, 0.29), 29);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        assert!(rank_mask(&[0.1f32, 0.2], 3).is_err());
        assert!(select_cache_mask(&[0.1f32], 1.0, 1).is_err());
        assert!(apply_stochastic_recovery(&CacheMask::full(2), 1.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn ties_cache_lower_indices_first() {
        let m = rank_mask(&[0.5f32, 0.5, 0.5, 0.1], 2).unwrap();
        assert_eq!(m.hard, vec![false, true, true, false]);
    }

    #[test]
    fn recovery_extremes() {
        let base = select_cache_mask(&[0.1, 0.2, 0.3, 0.4, 0.5], 0.6, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(apply_stochastic_recovery(&base, 0.0, &mut rng).unwrap(), base);
        let all = apply_stochastic_recovery(&base, 1.0, &mut rng).unwrap();
        assert!(all.hard.iter().all(|&b| b));
        assert_eq!(all.k, 0);
    }

    #[test]
    fn rule_based_static_scene_caches_lowest_indices() {
        let flow = MotionField::zeros(8, 8);
        let m = rule_based_mask(&flow, 0.5, 4).unwrap();
        assert_eq!(m.hard, vec![false, false, true, true]);
    }
}
