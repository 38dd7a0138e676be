use std::collections::BTreeMap;

use crate::error::Result;
use crate::numerics::{BoundParams, Gradients, Tape, Tensor};
use crate::par::Execution;
use crate::rng;
use crate::scenegen::{generate_episode, Episode, SceneConfig};

/// `count` episodes with seeds derived from `(seed, salt)`.
pub fn episode_set(scene: &SceneConfig, seed: u64, salt: u64, count: usize, exec: Execution) -> Result<Vec<Episode>> {
    let base = rng::mix(seed, salt);
    let seeds: Vec<u64> = (0..count as u64).map(|i| base.wrapping_add(i)).collect();
    exec.try_map(&seeds, |_, &s| generate_episode(scene, s))
}

/// Named gradient sums.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Grads {
    /// Gradients of the trainable entries of `params`.
    pub fn from_tape(tape: &Tape<f32>, grads: &Gradients<f32>, params: &BoundParams) -> Self {
        Grads {
            tensors: params
                .iter()
                .filter(|&(_, v)| tape.requires_grad(v))
                .map(|(n, v)| (n.to_string(), grads.wrt(tape, v)))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (name, g) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.tensors.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.tensors.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Sum of the entries whose name starts with `prefix`, by absolute value.
    pub fn abs_sum(&self, prefix: &str) -> f64 {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, g)| g.data().iter().map(|v| v.abs() as f64))
            .sum()
    }
}
