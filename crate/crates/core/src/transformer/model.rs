use rand_distr::{Distribution, Normal};

use super::attention::{min_max_normalise, multi_head};
use super::cache::LayerKVCache;
use super::rotary::rotary_tables;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::kernels::argmax;
use crate::numerics::{BoundParams, Bucket, FlopCounter, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng;

/// Which visual rows a step recomputes.
#[derive(Debug, Clone, Copy)]
pub enum Recompute<'a> {
    /// Every row, without reading a cache.
    All,
    /// Only these rows (ascending); the rest reuse the cache.
    Rows(&'a [usize]),
    /// Every row is computed, then each layer's keys/values are blended
    /// row-wise with the cache by the `[N]` mask on the tape:
    /// `m·new + (1 − m)·cached`. With a 0/1 forward value this equals the
    /// `Rows` result while letting gradients reach the mask.
    Blend(Var),
}

/// Tape handles produced by one step.
#[derive(Debug, Clone)]
pub struct StepGraph {
    /// `[vocab]` action logits.
    pub logits: Var,
    /// Per layer, the `N×D` keys/values the readout attended to.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Per layer and head, the readout's `1×(N+1)` attention row.
    pub readout_probs: Vec<Vec<Var>>,
    /// Rows recomputed this step.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T: Scalar = f32> {
    pub logits: Vec<T>,
    /// Readout-to-visual attention averaged over heads and layers, rescaled
    /// to sum to one over the `N` visual tokens.
    pub attention: Vec<f64>,
    pub cache: LayerKVCache<T>,
    /// Number of recomputed visual rows.
    pub n_act: usize,
    /// Instrumented count, when requested.
    pub flops: Option<FlopCounter>,
}

impl<T: Scalar> StepOutput<T> {
    /// Min-max normalised attention saliency (the Stage-I target).
    pub fn saliency(&self) -> Vec<f32> {
        min_max_normalise(&self.attention)
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}


#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

fn layer_key(l: usize, name: &str) -> String {
    format!("layer{l}.{name}")
}

impl Transformer<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::salt::INIT_BACKBONE);
        let (n, d, m, pd) = (config.tokens(), config.dim, config.ffn, config.patch_dim());
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut r) as f32)
        };
        let mut p = ParamStore::new();
        p.insert("embed.w", normal(&[pd, d], 1.0 / (pd as f64).sqrt()));
        p.insert("embed.pos", normal(&[n, d], 0.1));
        p.insert("readout", normal(&[1, d], 1.0));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(layer_key(l, w), normal(&[d, d], 1.0 / (d as f64).sqrt()));
            }
            p.insert(layer_key(l, "w1"), normal(&[d, m], 1.0 / (d as f64).sqrt()));
            p.insert(layer_key(l, "w2"), normal(&[m, d], 1.0 / (m as f64).sqrt()));
            p.insert(layer_key(l, "b1"), Tensor::zeros([m]));
            p.insert(layer_key(l, "b2"), Tensor::zeros([d]));
            p.insert(layer_key(l, "norm1"), Tensor::full([d], 1.0));
            p.insert(layer_key(l, "norm2"), Tensor::full([d], 1.0));
        }
        p.insert("final_norm", Tensor::full([d], 1.0));
        p.insert("head.w", normal(&[d, config.vocab], 1.0 / (d as f64).sqrt()));
        p.insert("head.b", Tensor::zeros([config.vocab]));
        Ok(Transformer { config, params: p })
    }
}

impl<T: Scalar> Transformer<T> {
    /// Wraps existing parameters after checking every expected tensor.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (n, d, m, pd, v) = (config.tokens(), config.dim, config.ffn, config.patch_dim(), config.vocab);
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            ("embed.w".into(), vec![pd, d]),
            ("embed.pos".into(), vec![n, d]),
            ("readout".into(), vec![1, d]),
            ("final_norm".into(), vec![d]),
            ("head.w".into(), vec![d, v]),
            ("head.b".into(), vec![v]),
        ];
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                expected.push((layer_key(l, w), vec![d, d]));
            }
            expected.push((layer_key(l, "w1"), vec![d, m]));
            expected.push((layer_key(l, "w2"), vec![m, d]));
            expected.push((layer_key(l, "b1"), vec![m]));
            expected.push((layer_key(l, "b2"), vec![d]));
            expected.push((layer_key(l, "norm1"), vec![d]));
            expected.push((layer_key(l, "norm2"), vec![d]));
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("checkpoint tensor", t.shape(), shape));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} backbone tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        Ok(Transformer { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Flattened patches `[N × 3p²]`, row-major over the patch grid; within
    /// a patch the order is channel, row, column.
    pub fn patches(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let (h, w, p) = (c.height, c.width, c.patch);
        if frame.shape() != [3, h, w] {
            return Err(Error::config(format!(
                "frame shape {:?} does not match model input 3×{h}×{w} (patch {p})",
                frame.shape()
            )));
        }
        let gw = w / p;
        let x = frame.data();
        let mut out = Vec::with_capacity(c.tokens() * c.patch_dim());
        for token in 0..c.tokens() {
            let (gy, gx) = (token / gw, token % gw);
            for ch in 0..3 {
                for dy in 0..p {
                    let row = (ch * h + gy * p + dy) * w + gx * p;
                    out.extend_from_slice(&x[row..row + p]);
                }
            }
        }
        Tensor::new([c.tokens(), c.patch_dim()], out)
    }

    /// Patch embeddings `[N × D]`: linear projection plus the per-token bias.
    pub fn tokenize_frame(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape, false);
        let x = self.embed(&mut tape, &p, frame, &(0..self.config.tokens()).collect::<Vec<_>>())?;
        Ok(tape.value(x).clone())
    }

    fn embed(&self, tape: &mut Tape<T>, p: &BoundParams, frame: &Tensor<T>, rows: &[usize]) -> Result<Var> {
        let all = self.patches(frame)?;
        let pd = self.config.patch_dim();
        let data = rows.iter().flat_map(|&r| all.row(r).iter().copied()).collect();
        let patches = tape.constant(Tensor::new([rows.len(), pd], data)?);
        let x = tape.matmul(patches, p.var("embed.w")?)?;
        let pos = tape.gather_rows(p.var("embed.pos")?, rows)?;
        tape.add(x, pos)
    }

    fn ffn(&self, tape: &mut Tape<T>, p: &BoundParams, l: usize, x: Var, bucket: Bucket, overhead: Bucket) -> Result<Var> {
        tape.set_bucket(overhead);
        let a = tape.rms_norm(x, p.var(&layer_key(l, "norm2"))?)?;
        tape.set_bucket(bucket);
        let h = tape.matmul(a, p.var(&layer_key(l, "w1"))?)?;
        tape.set_bucket(overhead);
        let h = tape.add_row(h, p.var(&layer_key(l, "b1"))?)?;
        let h = tape.gelu(h);
        tape.set_bucket(bucket);
        let o = tape.matmul(h, p.var(&layer_key(l, "w2"))?)?;
        tape.set_bucket(overhead);
        let o = tape.add_row(o, p.var(&layer_key(l, "b2"))?)?;
        tape.add(x, o)
    }

    /// Builds one step on `tape`. `cache` is required unless `rows` is
    /// [`Recompute::All`].
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        frame: &Tensor<T>,
        cache: Option<&LayerKVCache<T>>,
        rows: Recompute<'_>,
    ) -> Result<StepGraph> {
        let c = &self.config;
        let (n, heads, dh) = (c.tokens(), c.heads, c.head_dim());
        let active: Vec<usize> = match rows {
            Recompute::All | Recompute::Blend(_) => (0..n).collect(),
            Recompute::Rows(r) => {
                if r.windows(2).any(|w| w[0] >= w[1]) || r.last().is_some_and(|&i| i >= n) {
                    return Err(Error::contract("recompute rows must be ascending token indices"));
                }
                r.to_vec()
            }
        };
        let cache = match (rows, cache) {
            (Recompute::All, _) => None,
            (_, Some(cache)) => {
                if cache.tokens() != n || cache.layers() != c.layers {
                    return Err(Error::contract(format!(
                        "cache holds {} rows × {} layers, model needs {n} × {}",
                        cache.tokens(),
                        cache.layers(),
                        c.layers
                    )));
                }
                Some(cache)
            }
            (_, None) => {
                return Err(Error::contract(
                    "partial recompute needs a populated cache; the first step must be a full forward",
                ))
            }
        };
        if let Recompute::Blend(m) = rows {
            if tape.value(m).len() != n {
                return Err(Error::shape("blend mask", tape.shape(m), &[n]));
            }
        }

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let positions: Vec<f64> = active.iter().map(|&i| i as f64).collect();
        let (cos_a, sin_a) = rotary_tables::<T>(&positions, dh, c.rope_base)?;
        let (cos_r, sin_r) = rotary_tables::<T>(&[n as f64], dh, c.rope_base)?;

        let saved = tape.set_bucket(Bucket::Embed);
        let mut x = if active.is_empty() {
            None
        } else {
            Some(self.embed(tape, p, frame, &active)?)
        };
        let mut r = p.var("readout")?;

        let mut keys = Vec::with_capacity(c.layers);
        let mut values = Vec::with_capacity(c.layers);
        let mut readout_probs = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let norm1 = p.var(&layer_key(l, "norm1"))?;
            let (wq, wk, wv, wo) = (
                p.var(&layer_key(l, "wq"))?,
                p.var(&layer_key(l, "wk"))?,
                p.var(&layer_key(l, "wv"))?,
                p.var(&layer_key(l, "wo"))?,
            );

            // visual rows
            let mut new_kv = None;
            let mut visual_q = None;
            if let Some(xv) = x {
                tape.set_bucket(Bucket::LayerOverhead);
                let a = tape.rms_norm(xv, norm1)?;
                tape.set_bucket(Bucket::Projection);
                let q = tape.matmul(a, wq)?;
                let k = tape.matmul(a, wk)?;
                let v = tape.matmul(a, wv)?;
                tape.set_bucket(Bucket::LayerOverhead);
                let q = tape.rotary(q, cos_a.clone(), sin_a.clone(), dh)?;
                let k = tape.rotary(k, cos_a.clone(), sin_a.clone(), dh)?;
                visual_q = Some(tape.scale(q, scale));
                new_kv = Some((k, v));
            }
            tape.set_bucket(Bucket::LayerOverhead);
            let (kf, vf) = match (rows, cache, new_kv) {
                (Recompute::All, _, Some(kv)) => kv,
                (Recompute::Rows(_), Some(cache), kv) => {
                    let kb = tape.leaf(cache.keys[l].clone(), false);
                    let vb = tape.leaf(cache.values[l].clone(), false);
                    match kv {
                        Some((k, v)) => (tape.scatter_rows(kb, k, &active)?, tape.scatter_rows(vb, v, &active)?),
                        None => (kb, vb),
                    }
                }
                (Recompute::Blend(m), Some(cache), Some((k, v))) => {
                    let kb = tape.leaf(cache.keys[l].clone(), false);
                    let vb = tape.leaf(cache.values[l].clone(), false);
                    (tape.row_blend(m, k, kb)?, tape.row_blend(m, v, vb)?)
                }
                _ => return Err(Error::contract("inconsistent recompute state")),
            };

            if let (Some(xv), Some(q)) = (x, visual_q) {
                tape.set_bucket(Bucket::Attention);
                let (o, _) = multi_head(tape, q, kf, vf, heads)?;
                tape.set_bucket(Bucket::Projection);
                let o = tape.matmul(o, wo)?;
                tape.set_bucket(Bucket::LayerOverhead);
                let h = tape.add(xv, o)?;
                x = Some(self.ffn(tape, p, l, h, Bucket::Ffn, Bucket::LayerOverhead)?);
            }

            // readout row
            tape.set_bucket(Bucket::Readout);
            let a = tape.rms_norm(r, norm1)?;
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let q = tape.rotary(q, cos_r.clone(), sin_r.clone(), dh)?;
            let k = tape.rotary(k, cos_r.clone(), sin_r.clone(), dh)?;
            let q = tape.scale(q, scale);
            let kr = tape.concat_rows(&[kf, k])?;
            let vr = tape.concat_rows(&[vf, v])?;
            let (o, probs) = multi_head(tape, q, kr, vr, heads)?;
            let o = tape.matmul(o, wo)?;
            let h = tape.add(r, o)?;
            r = self.ffn(tape, p, l, h, Bucket::Readout, Bucket::Readout)?;

            keys.push(kf);
            values.push(vf);
            readout_probs.push(probs);
        }

        tape.set_bucket(Bucket::Head);
        let a = tape.rms_norm(r, p.var("final_norm")?)?;
        let logits = tape.matmul(a, p.var("head.w")?)?;
        let logits = tape.add_row(logits, p.var("head.b")?)?;
        let logits = tape.reshape(logits, [c.vocab])?;
        tape.set_bucket(saved);
        Ok(StepGraph {
            logits,
            keys,
            values,
            readout_probs,
            active,
        })
    }

    /// Reads the step's results off the tape and builds the next cache.
    /// `recomputed` marks the rows that now carry `timestep`.
    pub fn collect(
        &self,
        tape: &Tape<T>,
        graph: &StepGraph,
        prev: Option<&LayerKVCache<T>>,
        recomputed: &[bool],
        timestep: usize,
    ) -> StepOutput<T> {
        let n = self.config.tokens();
        let mut attention = vec![0.0f64; n];
        for layer in &graph.readout_probs {
            for &pv in layer {
                for (acc, v) in attention.iter_mut().zip(tape.value(pv).data()) {
                    *acc += v.as_f64();
                }
            }
        }
        let total: f64 = attention.iter().sum::<f64>();
        if total > 0.0 {
            attention.iter_mut().for_each(|a| *a /= total);
        }
        let mut last_computed = prev.map_or_else(|| vec![timestep; n], |c| c.last_computed.clone());
        for (i, &fresh) in recomputed.iter().enumerate() {
            if fresh {
                last_computed[i] = timestep;
            }
        }
        StepOutput {
            logits: tape.value(graph.logits).data().to_vec(),
            attention,
            cache: LayerKVCache {
                keys: graph.keys.iter().map(|&k| tape.value_arc(k)).collect(),
                values: graph.values.iter().map(|&v| tape.value_arc(v)).collect(),
                positions: (0..n).collect(),
                last_computed,
                timestep,
            },
            n_act: recomputed.iter().filter(|&&b| b).count(),
            flops: None,
        }
    }

    /// Inference step. `mask` (1 = recompute) selects a partial recompute
    /// against `prev`; `None` recomputes every row.
    pub fn step(
        &self,
        frame: &Tensor<T>,
        mask: Option<&[bool]>,
        prev: Option<&LayerKVCache<T>>,
        timestep: usize,
        count_flops: bool,
    ) -> Result<StepOutput<T>> {
        let n = self.config.tokens();
        let mut tape = Tape::inference();
        if count_flops {
            tape = tape.with_counting();
        }
        let p = self.params.bind(&mut tape, false);
        let (graph, recomputed) = match mask {
            None => (self.forward_graph(&mut tape, &p, frame, None, Recompute::All)?, vec![true; n]),
            Some(mask) => {
                if mask.len() != n {
                    return Err(Error::shape("cache mask", &[mask.len()], &[n]));
                }
                let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
                (self.forward_graph(&mut tape, &p, frame, prev, Recompute::Rows(&rows))?, mask.to_vec())
            }
        };
        let mut out = self.collect(&tape, &graph, prev, &recomputed, timestep);
        out.flops = tape.take_flops();
        Ok(out)
    }

    /// Recomputes every visual row. `prev` only seeds the bookkeeping.
    pub fn full_forward(&self, frame: &Tensor<T>, prev: Option<&LayerKVCache<T>>, timestep: usize) -> Result<StepOutput<T>> {
        self.step(frame, None, prev, timestep, false)
    }

    /// Recomputes rows with `mask[i] = true`; the rest reuse `prev`.
    pub fn partial_forward(
        &self,
        frame: &Tensor<T>,
        mask: &[bool],
        prev: &LayerKVCache<T>,
        timestep: usize,
    ) -> Result<StepOutput<T>> {
        self.step(frame, Some(mask), Some(prev), timestep, false)
    }
}
