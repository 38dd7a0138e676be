use std::sync::Arc;

use crate::numerics::{Scalar, Tensor};

/// Per-layer keys and values of the `N` visual tokens, as seen by the
/// readout at the end of a step.
///
/// Keys are stored after rotary rotation, so a reused row keeps the
/// positional encoding it was computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache<T: Scalar = f32> {
    pub keys: Vec<Arc<Tensor<T>>>,
    pub values: Vec<Arc<Tensor<T>>>,
    /// Position id of every row.
    pub positions: Vec<usize>,
    /// Step at which every row was last recomputed.
    pub last_computed: Vec<usize>,
    /// Step that produced this cache.
    pub timestep: usize,
}

impl<T: Scalar> LayerKVCache<T> {
    pub fn tokens(&self) -> usize {
        self.positions.len()
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    /// Rows that were not recomputed at the producing step.
    pub fn reused_rows(&self) -> usize {
        self.last_computed.iter().filter(|&&t| t != self.timestep).count()
    }

    pub fn cast<U: Scalar>(&self) -> LayerKVCache<U> {
        LayerKVCache {
            keys: self.keys.iter().map(|k| Arc::new(k.cast())).collect(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            positions: self.positions.clone(),
            last_computed: self.last_computed.clone(),
            timestep: self.timestep,
        }
    }
}
