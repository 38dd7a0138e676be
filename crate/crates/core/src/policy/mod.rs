//! The two per-step decision networks and their relaxations.
//!
//! The cached-token selector scores every visual token from the
//! motion-aware input `[frame; flow]`; the cache-ratio predictor picks how
//! many of the lowest-scoring tokens reuse their cached keys/values. Both
//! decisions are discrete in the forward pass; during training their
//! gradients come from a Gumbel-Softmax over ratios and a steep sigmoid
//! around the score threshold (straight-through).

mod masks;
mod nets;
mod relax;

pub use masks::{apply_stochastic_recovery, cached_count, rank_mask, rule_based_mask, select_cache_mask, CacheMask};
pub use nets::{PolicyNet, Part};
pub use relax::{gumbel_softmax, gumbel_values, mixed_soft_mask, ratio_loss, sample_gumbel, soft_mask, RatioDecision, SoftMask};

use serde::{Deserialize, Serialize};

use crate::costmodel::ConvSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Candidate cache ratios `R`, ascending, each in `[0, 1)`.
    pub ratios: Vec<f64>,
    /// Selector conv width `C_cnn`.
    pub selector_channels: usize,
    /// Average-pooling factor applied to the input before the selector convs.
    pub selector_pool: usize,
    /// Widths of the predictor's two conv layers.
    pub predictor_channels: [usize; 2],
    /// Average-pooling factor applied to the input before the predictor.
    pub predictor_pool: usize,
    /// Gumbel-Softmax temperature at the start and end of Stage II.
    pub tau_start: f64,
    pub tau_end: f64,
    /// Soft-mask temperature `τ_s`.
    pub tau_s: f64,
    /// Per-token probability that a cached row is forced to recompute.
    pub p_recover: f64,
    pub flow_block: usize,
    pub flow_radius: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            ratios: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            selector_channels: 8,
            selector_pool: 2,
            predictor_channels: [4, 8],
            predictor_pool: 4,
            tau_start: 2.0,
            tau_end: 0.5,
            tau_s: 0.1,
            p_recover: 0.05,
            flow_block: 4,
            flow_radius: 2,
        }
    }
}

impl PolicyConfig {
    /// Whether two configs describe the same networks and inputs, ignoring
    /// temperatures and the recovery probability.
    pub fn same_architecture(&self, other: &PolicyConfig) -> bool {
        self.ratios == other.ratios
            && self.selector_channels == other.selector_channels
            && self.selector_pool == other.selector_pool
            && self.predictor_channels == other.predictor_channels
            && self.predictor_pool == other.predictor_pool
            && self.flow_block == other.flow_block
            && self.flow_radius == other.flow_radius
    }

    pub fn validate(&self, height: usize, width: usize, patch: usize) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::config("the ratio set R is empty"));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) || self.ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::config(format!(
                "ratios {:?} must be strictly ascending in [0, 1)",
                self.ratios
            )));
        }
        if !(0.0..=1.0).contains(&self.p_recover) {
            return Err(Error::config("p_recover must lie in [0, 1]"));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_s > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if self.selector_pool == 0 || !patch.is_multiple_of(self.selector_pool) {
            return Err(Error::config(format!(
                "selector pool {} must divide the patch size {patch}",
                self.selector_pool
            )));
        }
        let pp = self.predictor_pool;
        if pp == 0 || !height.is_multiple_of(pp) || !width.is_multiple_of(pp) {
            return Err(Error::config(format!("predictor pool {pp} must divide {height}×{width}")));
        }
        if self.flow_block == 0 || !height.is_multiple_of(self.flow_block) || !width.is_multiple_of(self.flow_block) {
            return Err(Error::config(format!("flow block {} must divide {height}×{width}", self.flow_block)));
        }
        if self.selector_channels == 0 || self.predictor_channels.contains(&0) {
            return Err(Error::config("policy conv widths must be positive"));
        }
        Ok(())
    }

    /// Gumbel temperature after `progress ∈ [0, 1]` of Stage II.
    pub fn tau_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.tau_start + (self.tau_end - self.tau_start) * p
    }

    /// Every conv (and the final linear layer, as a 1×1 conv on a 1×1 map)
    /// of both networks for an `height×width` input.
    pub fn conv_specs(&self, height: usize, width: usize) -> Vec<ConvSpec> {
        let c = self.selector_channels;
        let (sh, sw) = (height / self.selector_pool, width / self.selector_pool);
        let (ph, pw) = (height / self.predictor_pool, width / self.predictor_pool);
        let [p1, p2] = self.predictor_channels;
        vec![
            ConvSpec::same(5, c, 3, sh, sw),
            ConvSpec::same(c, c, 3, sh, sw),
            ConvSpec::same(c, 1, 1, sh, sw),
            ConvSpec::same(5, p1, 3, ph, pw),
            ConvSpec::same(p1, p2, 3, ph, pw),
            ConvSpec::same(2 * p2, self.ratios.len(), 1, 1, 1),
        ]
    }
}

/// `V_t = [I_t; O_t]` with `O_t` block-matched from `prev` (zero at the
/// first step of an episode). Also returns the flow field itself.
pub fn motion_input(
    prev: Option<&crate::scenegen::Frame>,
    cur: &crate::scenegen::Frame,
    cfg: &PolicyConfig,
    flow_scale: f32,
) -> Result<(crate::numerics::Tensor<f32>, crate::scenegen::MotionField)> {
    let flow = match prev {
        Some(p) => crate::scenegen::estimate_flow(p, cur, cfg.flow_block, cfg.flow_radius)?,
        None => crate::scenegen::MotionField::zeros(cur.height, cur.width),
    };
    let v = crate::scenegen::build_motion_input(cur, &flow, flow_scale)?;
    Ok((v, flow))
}
