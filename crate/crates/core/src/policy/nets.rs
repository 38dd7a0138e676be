use rand_distr::{Distribution, Normal};

use super::PolicyConfig;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Bucket, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng;

/// Which policy network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Selector,
    Predictor,
}

impl Part {
    pub fn prefix(self) -> &'static str {
        match self {
            Part::Selector => "sel.",
            Part::Predictor => "pred.",
        }
    }
}

/// Parameters of the cached-token selector and the cache-ratio predictor.
///
/// Selector: `pool(s) → conv3×3 5→C → ReLU → conv3×3 C→C → ReLU →
/// conv1×1 C→1 → pool to the token grid → sigmoid`.
/// Predictor: `pool(q) → conv3×3 5→P1 → ReLU → conv3×3 P1→P2 → ReLU →
/// global average and max pool → linear 2·P2→|R|`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<T: Scalar = f32> {
    pub config: PolicyConfig,
    /// Frame height, width and tokenizer patch size.
    pub geometry: (usize, usize, usize),
    pub params: ParamStore<T>,
}

fn shapes(cfg: &PolicyConfig) -> Vec<(&'static str, Vec<usize>)> {
    let c = cfg.selector_channels;
    let [p1, p2] = cfg.predictor_channels;
    let r = cfg.ratios.len();
    vec![
        ("sel.c1.w", vec![c, 5, 3, 3]),
        ("sel.c1.b", vec![c]),
        ("sel.c2.w", vec![c, c, 3, 3]),
        ("sel.c2.b", vec![c]),
        ("sel.c3.w", vec![1, c, 1, 1]),
        ("sel.c3.b", vec![1]),
        ("pred.c1.w", vec![p1, 5, 3, 3]),
        ("pred.c1.b", vec![p1]),
        ("pred.c2.w", vec![p2, p1, 3, 3]),
        ("pred.c2.b", vec![p2]),
        ("pred.fc.w", vec![2 * p2, r]),
        ("pred.fc.b", vec![r]),
    ]
}

impl PolicyNet<f32> {
    /// He-normal weights, zero biases.
    pub fn init(config: PolicyConfig, geometry: (usize, usize, usize), seed: u64) -> Result<Self> {
        config.validate(geometry.0, geometry.1, geometry.2)?;
        let mut r = rng::stream(seed, rng::salt::INIT_POLICY);
        let mut params = ParamStore::new();
        for (name, shape) in shapes(&config) {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let fan_in = if name == "pred.fc.w" { shape[0] } else { fan_in };
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                Tensor::from_fn(shape, |_| dist.sample(&mut r) as f32)
            };
            params.insert(name, t);
        }
        Ok(PolicyNet { config, geometry, params })
    }

    /// All weights and biases zero.
    pub fn zeros(config: PolicyConfig, geometry: (usize, usize, usize)) -> Result<Self> {
        config.validate(geometry.0, geometry.1, geometry.2)?;
        let mut params = ParamStore::new();
        for (name, shape) in shapes(&config) {
            params.insert(name, Tensor::zeros(shape));
        }
        Ok(PolicyNet { config, geometry, params })
    }
}

impl<T: Scalar> PolicyNet<T> {
    /// Takes temperatures and `p_recover` from `config`, which must describe
    /// the same architecture as the loaded weights.
    pub fn adopt_settings(&mut self, config: &PolicyConfig) -> Result<()> {
        if !self.config.same_architecture(config) {
            return Err(Error::config("policy checkpoint was trained with a different policy architecture"));
        }
        self.config = config.clone();
        Ok(())
    }

    pub fn from_params(config: PolicyConfig, geometry: (usize, usize, usize), params: ParamStore<T>) -> Result<Self> {
        config.validate(geometry.0, geometry.1, geometry.2)?;
        let want = shapes(&config);
        for (name, shape) in &want {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("policy tensor", t.shape(), shape));
            }
        }
        if params.len() != want.len() {
            return Err(Error::Format(format!("expected {} policy tensors, found {}", want.len(), params.len())));
        }
        Ok(PolicyNet { config, geometry, params })
    }

    pub fn cast<U: Scalar>(&self) -> PolicyNet<U> {
        PolicyNet {
            config: self.config.clone(),
            geometry: self.geometry,
            params: self.params.cast(),
        }
    }

    pub fn tokens(&self) -> usize {
        let (h, w, p) = self.geometry;
        (h / p) * (w / p)
    }

    fn check_input(&self, tape: &Tape<T>, v: Var) -> Result<()> {
        let (h, w, _) = self.geometry;
        if tape.shape(v) != [5, h, w] {
            return Err(Error::shape("motion-aware input", tape.shape(v), &[5, h, w]));
        }
        Ok(())
    }

    /// Saliency scores `[N]` in `(0, 1)`.
    pub fn selector_forward(&self, tape: &mut Tape<T>, p: &BoundParams, v: Var) -> Result<Var> {
        self.check_input(tape, v)?;
        let saved = tape.set_bucket(Bucket::Policy);
        let s = self.config.selector_pool;
        let x = if s > 1 { tape.avg_pool(v, s)? } else { v };
        let x = tape.conv2d(x, p.var("sel.c1.w")?, Some(p.var("sel.c1.b")?), 1, 1)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, p.var("sel.c2.w")?, Some(p.var("sel.c2.b")?), 1, 1)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, p.var("sel.c3.w")?, Some(p.var("sel.c3.b")?), 1, 0)?;
        let grid = self.geometry.2 / s;
        let x = if grid > 1 { tape.avg_pool(x, grid)? } else { x };
        let x = tape.sigmoid(x);
        let out = tape.reshape(x, [self.tokens()])?;
        tape.set_bucket(saved);
        Ok(out)
    }

    /// Ratio logits `[|R|]`.
    pub fn predictor_forward(&self, tape: &mut Tape<T>, p: &BoundParams, v: Var) -> Result<Var> {
        self.check_input(tape, v)?;
        let saved = tape.set_bucket(Bucket::Policy);
        let q = self.config.predictor_pool;
        let x = if q > 1 { tape.avg_pool(v, q)? } else { v };
        let x = tape.conv2d(x, p.var("pred.c1.w")?, Some(p.var("pred.c1.b")?), 1, 1)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, p.var("pred.c2.w")?, Some(p.var("pred.c2.b")?), 1, 1)?;
        let x = tape.relu(x);
        let p2 = self.config.predictor_channels[1];
        let avg = tape.global_avg_pool(x)?;
        let avg = tape.reshape(avg, [1, p2])?;
        let max = tape.global_max_pool(x)?;
        let max = tape.reshape(max, [1, p2])?;
        let g = tape.concat_cols(&[avg, max])?;
        let l = tape.matmul(g, p.var("pred.fc.w")?)?;
        let l = tape.add_row(l, p.var("pred.fc.b")?)?;
        let out = tape.reshape(l, [self.config.ratios.len()])?;
        tape.set_bucket(saved);
        Ok(out)
    }

    /// Inference-only scores for one motion-aware input.
    pub fn scores(&self, v: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(v.clone());
        let s = self.selector_forward(&mut tape, &p, x)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Inference-only ratio logits for one motion-aware input.
    pub fn ratio_logits(&self, v: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(v.clone());
        let l = self.predictor_forward(&mut tape, &p, x)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Binds only the parameters of `parts` as trainable; the rest are
    /// constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &[Part]) -> BoundParams {
        let all = self.params.bind(tape, false);
        let mut bound = BoundParams::default();
        for (name, var) in all.iter() {
            let train = trainable.iter().any(|p| name.starts_with(p.prefix()));
            let v = if train {
                tape.leaf(tape.value_arc(var), true)
            } else {
                var
            };
            bound.insert(name, v);
        }
        bound
    }
}
