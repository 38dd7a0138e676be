use super::render::Frame;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-pixel displacement `(dx, dy)` in pixels/frame: content at `p` in the
/// current frame came from `p − (dx, dy)` in the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl MotionField {
    pub fn zeros(height: usize, width: usize) -> Self {
        MotionField {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    pub fn magnitude(&self, i: usize) -> f32 {
        self.dx[i].hypot(self.dy[i])
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|&v| v == 0.0)
    }
}

/// Candidate displacements in tie-break order: smaller magnitude first, then
/// lexicographic `(dy, dx)`.
fn candidates(radius: i32) -> Vec<(i32, i32)> {
    let mut c: Vec<(i32, i32)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dy, dx)))
        .collect();
    c.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    c
}

/// SAD block matching on luminance. Every `block×block` tile of `cur` is
/// compared against `prev` shifted by each displacement within `radius`;
/// samples of `prev` outside the frame are clamped to the nearest edge pixel
/// so all candidates are always evaluated.
pub fn estimate_flow(prev: &Frame, cur: &Frame, block: usize, radius: usize) -> Result<MotionField> {
    let (h, w) = (cur.height, cur.width);
    if prev.height != h || prev.width != w {
        return Err(Error::shape("estimate_flow", &[prev.height, prev.width], &[h, w]));
    }
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::contract(format!("block {block} does not divide {h}×{w}")));
    }
    let cands = candidates(radius as i32);
    let mut field = MotionField::zeros(h, w);
    let clamp = |v: i32, hi: usize| v.clamp(0, hi as i32 - 1) as usize;
    let (pp, cp) = (prev.luminance(), cur.luminance());
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let mut best = (f32::INFINITY, (0, 0));
            for &(dy, dx) in &cands {
                let mut sad = 0.0f32;
                for y in by..by + block {
                    let sy = clamp(y as i32 - dy, h);
                    for x in bx..bx + block {
                        let sx = clamp(x as i32 - dx, w);
                        sad += (cp[y * w + x] - pp[sy * w + sx]).abs();
                    }
                }
                if sad < best.0 {
                    best = (sad, (dy, dx));
                }
            }
            let (dy, dx) = best.1;
            for y in by..by + block {
                for x in bx..bx + block {
                    field.dx[y * w + x] = dx as f32;
                    field.dy[y * w + x] = dy as f32;
                }
            }
        }
    }
    Ok(field)
}

/// Operation count of [`estimate_flow`]: every compared pixel costs a
/// subtraction, an absolute value and an accumulation, plus three operations
/// per pixel to form the current frame's luminance (the previous frame's is
/// carried over from the step before).
pub fn flow_cost(height: usize, width: usize, block: usize, radius: usize) -> u64 {
    let blocks = (height / block) * (width / block);
    let window = (2 * radius + 1).pow(2);
    (blocks * window * block * block * 3 + 3 * height * width) as u64
}

/// `[I_t; O_t / max_speed]` as a `5×H×W` tensor, flow clamped to `[−1, 1]`.
pub fn build_motion_input(frame: &Frame, flow: &MotionField, max_speed: f32) -> Result<Tensor<f32>> {
    if frame.height != flow.height || frame.width != flow.width {
        return Err(Error::shape(
            "build_motion_input",
            &[frame.height, frame.width],
            &[flow.height, flow.width],
        ));
    }
    if max_speed.is_nan() || max_speed <= 0.0 {
        return Err(Error::contract("max_speed must be positive"));
    }
    let mut data = Vec::with_capacity(5 * frame.height * frame.width);
    data.extend_from_slice(&frame.data);
    data.extend(flow.dx.iter().map(|v| (v / max_speed).clamp(-1.0, 1.0)));
    data.extend(flow.dy.iter().map(|v| (v / max_speed).clamp(-1.0, 1.0)));
    Tensor::new([5, frame.height, frame.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(h: usize, w: usize, v: f32) -> Frame {
        Frame { height: h, width: w, timestep: 0, data: vec![v; 3 * h * w] }
    }

    #[test]
    fn candidate_order_prefers_small_then_lexicographic() {
        let c = candidates(1);
        assert_eq!(c[0], (0, 0));
        assert_eq!(&c[1..5], &[(-1, 0), (0, -1), (0, 1), (1, 0)]);
        assert_eq!(c.len(), 9);
    }

    #[test]
    fn uniform_frames_give_zero_field() {
        let f = blank(16, 16, 0.3);
        assert!(estimate_flow(&f, &f, 4, 2).unwrap().is_zero());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(estimate_flow(&blank(8, 8, 0.0), &blank(8, 12, 0.0), 4, 1).is_err());
    }

    #[test]
    fn cost_formula_at_defaults() {
        // 64 blocks · 25 candidates · 16 pixels · 3 ops, plus luminance
        assert_eq!(flow_cost(32, 32, 4, 2), 64 * 25 * 16 * 3 + 3 * 1024);
    }

    #[test]
    fn motion_input_normalises_and_clamps() {
        let f = blank(4, 4, 0.5);
        let mut flow = MotionField::zeros(4, 4);
        flow.dx[0] = 2.0;
        flow.dy[1] = -6.0;
        let v = build_motion_input(&f, &flow, 2.0).unwrap();
        assert_eq!(v.shape(), &[5, 4, 4]);
        assert_eq!(&v.data()[..48], &f.data[..]);
        assert_eq!(v.get(&[3, 0, 0]), 1.0);
        assert_eq!(v.get(&[4, 0, 1]), -1.0);
    }
}
