//! Synthetic frame streams with known motion.
//!
//! Each episode shows a textured task sprite (reddish) and optionally a
//! distractor sprite (bluish) moving over a static low-contrast background.
//! The action label at step `t` is the grid cell holding the task sprite's
//! centre at `t + 1`, so the label is unaffected by the distractor.

mod flow;
mod io;
mod render;

pub use flow::{build_motion_input, estimate_flow, flow_cost, MotionField};
pub use io::{read_episode, write_episode, write_pgm};
pub use render::{generate_episode, ground_truth_flow, Episode, Frame, Sprite};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Motion regime of an episode. All sprites in an episode share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneClass {
    /// Nothing moves.
    Static,
    /// Velocity components within half the maximum speed, not both zero.
    Slow,
    /// At least one velocity component at the maximum speed.
    Fast,
}

impl SceneClass {
    pub const ALL: [SceneClass; 3] = [SceneClass::Static, SceneClass::Slow, SceneClass::Fast];

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::Static => "static",
            SceneClass::Slow => "slow",
            SceneClass::Fast => "fast",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown scene class code {c}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per episode.
    pub length: usize,
    /// Side of the square grid cell used for labels; equals the tokenizer patch.
    pub cell: usize,
    pub sprite_size: usize,
    pub distractor_size: usize,
    pub distractor: bool,
    /// Maximum per-axis sprite speed in pixels/frame.
    pub max_speed: i32,
    /// Per-step probability that a sprite redraws its velocity.
    pub velocity_change_prob: f64,
    /// Fraction of background pixels that carry a texture speckle.
    pub background_density: f64,
    /// Amplitude of background speckles around the base grey.
    pub background_contrast: f32,
    /// Classes an episode is drawn from, uniformly.
    pub classes: Vec<SceneClass>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            length: 12,
            cell: 4,
            sprite_size: 6,
            distractor_size: 6,
            distractor: true,
            max_speed: 2,
            velocity_change_prob: 0.1,
            background_density: 0.5,
            background_contrast: 0.06,
            classes: SceneClass::ALL.to_vec(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("episode length must be positive"));
        }
        if self.cell == 0 || !self.height.is_multiple_of(self.cell) || !self.width.is_multiple_of(self.cell) {
            return Err(Error::config(format!(
                "frame {}×{} is not divisible by cell size {}",
                self.height, self.width, self.cell
            )));
        }
        for (what, s) in [("task sprite", self.sprite_size), ("distractor", self.distractor_size)] {
            if s == 0 || s > self.height || s > self.width {
                return Err(Error::config(format!(
                    "{what} of size {s} does not fit in a {}×{} frame",
                    self.height, self.width
                )));
            }
        }
        if self.max_speed < 0 {
            return Err(Error::config("max_speed must be non-negative"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("at least one scene class is required"));
        }
        if !(0.0..=1.0).contains(&self.velocity_change_prob) || !(0.0..=1.0).contains(&self.background_density) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.cell, self.width / self.cell)
    }

    /// Label vocabulary size (number of grid cells).
    pub fn cells(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flow normalisation constant; at least 1 so static configs stay finite.
    pub fn flow_scale(&self) -> f32 {
        self.max_speed.max(1) as f32
    }
}
