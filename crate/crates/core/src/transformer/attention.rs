use super::cache::LayerKVCache;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Multi-head scaled dot-product attention on a tape. `q` must already be
/// scaled by `1/√head_dim`. Returns the concatenated head outputs and the
/// per-head probability matrices.
pub(crate) fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let p = tape.softmax_rows(s)?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, probs))
}

/// Attention output of `query[m×D]` over `keys`/`values[n×D]`.
pub fn attend<T: Scalar>(query: &Tensor<T>, keys: &Tensor<T>, values: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let d = query.dims2()?.1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("dim {d} is not divisible by {heads} heads")));
    }
    let mut tape = Tape::inference();
    let q = tape.constant(query.clone());
    let q = tape.scale(q, T::of(1.0 / ((d / heads) as f64).sqrt()));
    let k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    let (out, _) = multi_head(&mut tape, q, k, v, heads)?;
    Ok(tape.value(out).clone())
}

/// Attention of `query` over one cached layer with its rows reordered by
/// `perm` (row `i` of the permuted set is original row `perm[i]`, applied to
/// keys and values jointly). A valid permutation leaves the output unchanged.
pub fn permute_kv_check<T: Scalar>(
    cache: &LayerKVCache<T>,
    layer: usize,
    query: &Tensor<T>,
    perm: &[usize],
    heads: usize,
) -> Result<Tensor<T>> {
    let n = cache.tokens();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::contract(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    let k = cache
        .keys
        .get(layer)
        .ok_or_else(|| Error::contract(format!("layer {layer} not in cache")))?;
    let v = &cache.values[layer];
    let d = k.dims2()?.1;
    let gather = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let data = perm.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Tensor::new([n, d], data)
    };
    attend(query, &gather(k)?, &gather(v)?, heads)
}

/// Min-max normalisation to `[0, 1]`; a constant vector maps to 0.5.
pub fn min_max_normalise(x: &[f64]) -> Vec<f32> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; x.len()];
    }
    x.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_normalises_to_half() {
        assert_eq!(min_max_normalise(&[0.25; 4]), vec![0.5; 4]);
    }

    #[test]
    fn dominant_token_maps_to_one() {
        let s = min_max_normalise(&[0.1, 0.7, 0.1, 0.1]);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_key_attention_returns_its_value() {
        let q = Tensor::from_rows(&[vec![0.3f32, -1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![2.0f32, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![5.0f32, -4.0]]).unwrap();
        assert_eq!(attend(&q, &k, &v, 1).unwrap().data(), &[5.0, -4.0]);
    }
}
