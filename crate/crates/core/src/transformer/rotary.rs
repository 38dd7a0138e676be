use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor};

/// Cosine and sine tables for `positions`, `head_dim/2` angles each, with
/// frequencies `base^(−2i/head_dim)`.
pub fn rotary_tables<T: Scalar>(positions: &[f64], head_dim: usize, base: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::config(format!("rotary head dim {head_dim} must be even")));
    }
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = (p * theta).sin_cos();
            cos.push(T::of(c));
            sin.push(T::of(s));
        }
    }
    Ok((cos, sin))
}

/// Rotates adjacent column pairs of every head of `x[m×d]` by the angle of
/// each row's position.
pub fn apply_rotary<T: Scalar>(x: &Tensor<T>, positions: &[f64], head_dim: usize, base: f64) -> Result<Tensor<T>> {
    let (cos, sin) = rotary_tables(positions, head_dim, base)?;
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let r = tape.rotary(v, cos, sin, head_dim)?;
    Ok(tape.value(r).clone())
}
