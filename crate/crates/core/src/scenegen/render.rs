use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::flow::MotionField;
use super::{SceneClass, SceneConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// One RGB-like frame, channel-major `3×H×W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub timestep: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Channel mean per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|i| (self.data[i] + self.data[hw + i] + self.data[2 * hw + i]) / 3.0)
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([3, self.height, self.width], self.data.clone()).expect("frame size")
    }
}

/// A square sprite and its top-left corner at steps `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub size: usize,
    /// `(x, y)` per step; one more entry than there are frames.
    pub positions: Vec<(i32, i32)>,
}

impl Sprite {
    pub fn centre(&self, t: usize) -> (i32, i32) {
        let (x, y) = self.positions[t];
        let h = (self.size / 2) as i32;
        (x + h, y + h)
    }

    pub fn displacement(&self, t: usize) -> (i32, i32) {
        let (x1, y1) = self.positions[t];
        let (x0, y0) = self.positions[t - 1];
        (x1 - x0, y1 - y0)
    }

    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let (sx, sy) = self.positions[t];
        let (x, y) = (x as i32, y as i32);
        let s = self.size as i32;
        x >= sx && x < sx + s && y >= sy && y < sy + s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub height: usize,
    pub width: usize,
    pub cell: usize,
    pub max_speed: i32,
    pub seed: u64,
    pub class: SceneClass,
    pub frames: Vec<Frame>,
    pub task: Sprite,
    pub distractor: Option<Sprite>,
    /// Per step, `H×W` pixels covered by a moving sprite at `t − 1` or `t`.
    pub motion_masks: Vec<Vec<bool>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn grid_width(&self) -> usize {
        self.width / self.cell
    }

    fn cell_of(&self, (cx, cy): (i32, i32)) -> usize {
        let gw = self.grid_width() as i32;
        let gh = (self.height / self.cell) as i32;
        let col = (cx / self.cell as i32).clamp(0, gw - 1);
        let row = (cy / self.cell as i32).clamp(0, gh - 1);
        (row * gw + col) as usize
    }

    /// Grid cell of the task sprite centre at step `t` (`0..=T`).
    pub fn task_cell(&self, t: usize) -> usize {
        self.cell_of(self.task.centre(t))
    }

    pub fn distractor_cell(&self, t: usize) -> Option<usize> {
        self.distractor.as_ref().map(|d| self.cell_of(d.centre(t)))
    }

    /// Target action class for step `t`: where the task sprite will be next.
    pub fn label(&self, t: usize) -> usize {
        self.task_cell(t + 1)
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|t| self.label(t)).collect()
    }

    /// Per token (`patch×patch` block, row-major), whether any motion-mask
    /// pixel falls inside it at step `t`.
    pub fn token_motion(&self, t: usize, patch: usize) -> Vec<bool> {
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mask = &self.motion_masks[t];
        let mut out = vec![false; gh * gw];
        for y in 0..self.height {
            for x in 0..self.width {
                if mask[y * self.width + x] {
                    out[(y / patch) * gw + x / patch] = true;
                }
            }
        }
        out
    }

    pub fn flow_scale(&self) -> f32 {
        self.max_speed.max(1) as f32
    }

    fn sprites(&self) -> impl Iterator<Item = &Sprite> {
        self.distractor.iter().chain(std::iter::once(&self.task))
    }
}

const TASK_COLOUR: [f32; 3] = [1.0, 0.35, 0.2];
const DISTRACTOR_COLOUR: [f32; 3] = [0.2, 0.45, 1.0];
const BACKGROUND_GREY: f32 = 0.2;

/// Fixed per-pixel brightness pattern of a sprite, in `[0.55, 1.0]`.
fn texture(kind: u64, y: usize, x: usize) -> f32 {
    let h = rng::mix(kind, ((y as u64) << 16) | x as u64);
    0.55 + 0.45 * ((h >> 40) as f32 / (1u64 << 24) as f32)
}

fn sample_velocity(rng: &mut ChaCha8Rng, class: SceneClass, max_speed: i32) -> (i32, i32) {
    if max_speed == 0 {
        return (0, 0);
    }
    match class {
        SceneClass::Static => (0, 0),
        SceneClass::Slow => {
            let s = (max_speed / 2).max(1);
            loop {
                let v = (rng.random_range(-s..=s), rng.random_range(-s..=s));
                if v != (0, 0) {
                    return v;
                }
            }
        }
        SceneClass::Fast => {
            let s = max_speed;
            let fast = if rng.random::<bool>() { s } else { -s };
            let other = rng.random_range(-s..=s);
            if rng.random::<bool>() {
                (fast, other)
            } else {
                (other, fast)
            }
        }
    }
}

fn trajectory(rng: &mut ChaCha8Rng, cfg: &SceneConfig, class: SceneClass, size: usize) -> Sprite {
    let lim_x = (cfg.width - size) as i32;
    let lim_y = (cfg.height - size) as i32;
    let mut pos = (rng.random_range(0..=lim_x), rng.random_range(0..=lim_y));
    let mut vel = sample_velocity(rng, class, cfg.max_speed);
    let mut positions = Vec::with_capacity(cfg.length + 1);
    positions.push(pos);
    for _ in 0..cfg.length {
        if rng.random_bool(cfg.velocity_change_prob) {
            vel = sample_velocity(rng, class, cfg.max_speed);
        }
        let step = |p: i32, v: &mut i32, lim: i32| {
            if p + *v < 0 || p + *v > lim {
                *v = -*v;
            }
            (p + *v).clamp(0, lim)
        };
        pos = (step(pos.0, &mut vel.0, lim_x), step(pos.1, &mut vel.1, lim_y));
        positions.push(pos);
    }
    Sprite { size, positions }
}

/// Renders a deterministic episode from `(config, seed)`.
pub fn generate_episode(cfg: &SceneConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, rng::salt::SCENE);
    let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
    let (h, w) = (cfg.height, cfg.width);

    let background: Vec<f32> = (0..h * w)
        .map(|_| {
            if rng.random_bool(cfg.background_density) {
                BACKGROUND_GREY + cfg.background_contrast * rng.random_range(-1.0f32..=1.0)
            } else {
                BACKGROUND_GREY
            }
        })
        .collect();
    let task = trajectory(&mut rng, cfg, class, cfg.sprite_size);
    let distractor = cfg
        .distractor
        .then(|| trajectory(&mut rng, cfg, class, cfg.distractor_size));

    let mut frames = Vec::with_capacity(cfg.length);
    let mut motion_masks = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(&background);
        }
        let layers = distractor
            .iter()
            .map(|s| (s, DISTRACTOR_COLOUR, 2u64))
            .chain(std::iter::once((&task, TASK_COLOUR, 1u64)));
        for (sprite, colour, kind) in layers {
            let (sx, sy) = sprite.positions[t];
            for dy in 0..sprite.size {
                for dx in 0..sprite.size {
                    let (y, x) = (sy as usize + dy, sx as usize + dx);
                    let f = texture(kind, dy, dx);
                    for (c, base) in colour.iter().enumerate() {
                        data[(c * h + y) * w + x] = (base * f).clamp(0.0, 1.0);
                    }
                }
            }
        }
        frames.push(Frame { height: h, width: w, timestep: t, data });

        let mut mask = vec![false; h * w];
        if t > 0 {
            let movers = distractor.iter().chain(std::iter::once(&task));
            for sprite in movers.filter(|s| s.displacement(t) != (0, 0)) {
                for y in 0..h {
                    for x in 0..w {
                        if sprite.covers(t - 1, y, x) || sprite.covers(t, y, x) {
                            mask[y * w + x] = true;
                        }
                    }
                }
            }
        }
        motion_masks.push(mask);
    }

    Ok(Episode {
        height: h,
        width: w,
        cell: cfg.cell,
        max_speed: cfg.max_speed,
        seed,
        class,
        frames,
        task,
        distractor,
        motion_masks,
    })
}

/// Exact displacement of every sprite pixel between `t − 1` and `t`;
/// background pixels are zero. Later-drawn sprites win on overlap.
pub fn ground_truth_flow(ep: &Episode, t: usize) -> Result<MotionField> {
    if t == 0 || t >= ep.len() {
        return Err(Error::contract(format!(
            "ground-truth flow needs 1 <= t < {}, got {t}",
            ep.len()
        )));
    }
    let (h, w) = (ep.height, ep.width);
    let mut field = MotionField::zeros(h, w);
    for sprite in ep.sprites() {
        let (ddx, ddy) = sprite.displacement(t);
        for y in 0..h {
            for x in 0..w {
                if sprite.covers(t, y, x) {
                    field.dx[y * w + x] = ddx as f32;
                    field.dy[y * w + x] = ddy as f32;
                }
            }
        }
    }
    Ok(field)
}
