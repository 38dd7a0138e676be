use std::sync::Arc;

use super::flops::{Bucket, FlopCounter};
use super::kernels::{self, ConvGeometry};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    AvgPool { x: Var, c: usize, h: usize, w: usize, p: usize },
    GlobalAvgPool { x: Var, c: usize, hw: usize },
    GlobalMaxPool { x: Var, hw: usize, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Dot { x: Var, w: Arc<Vec<T>> },
    Gather { x: Var, rows: Vec<usize>, cols: usize },
    ScatterRows { base: Var, src: Var, rows: Vec<usize>, cols: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize, cols: usize },
    ConcatCols(Vec<Var>),
    Rotary { x: Var, cos: Vec<T>, sin: Vec<T>, head_dim: usize },
    RowBlend { m: Var, a: Var, b: Var },
    StraightThrough(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    Mse { x: Var, target: Arc<Tensor<T>> },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations so gradients can be replayed in reverse.
///
/// A tape built with `grad_enabled = false` still evaluates and records
/// values (and FLOPs, when counting) but marks nothing as differentiable.
/// Graphs are rebuilt per step; a tape is single-owner.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    counter: Option<FlopCounter>,
    bucket: Bucket,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            counter: None,
            bucket: Bucket::Other,
        }
    }

    /// A tape that evaluates only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_counting(mut self) -> Self {
        self.counter = Some(FlopCounter::new());
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the attribution bucket for subsequent primitives and returns the
    /// previous one.
    pub fn set_bucket(&mut self, bucket: Bucket) -> Bucket {
        std::mem::replace(&mut self.bucket, bucket)
    }

    pub fn bucket(&self) -> Bucket {
        self.bucket
    }

    /// The instrumented count of this trace.
    pub fn flops(&self) -> Result<&FlopCounter> {
        self.counter
            .as_ref()
            .ok_or_else(|| Error::contract("FLOP counting is disabled on this tape"))
    }

    pub fn take_flops(&mut self) -> Option<FlopCounter> {
        self.counter.take()
    }

    fn macs(&mut self, n: u64) {
        if let Some(c) = self.counter.as_mut() {
            c.add_macs(self.bucket, n);
        }
    }

    fn elementwise(&mut self, n: u64) {
        if let Some(c) = self.counter.as_mut() {
            c.add_elementwise(self.bucket, n);
        }
    }

    /// Records `n` elementwise FLOPs for work done outside the tape.
    pub fn record_elementwise(&mut self, n: u64) {
        self.elementwise(n);
    }

    /// Records `n` multiply-accumulates for work done outside the tape.
    pub fn record_macs(&mut self, n: u64) {
        self.macs(n);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.macs((m * k * n) as u64);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        self.macs((m * k * n) as u64);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.elementwise(self.value(a).len() as u64);
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.elementwise(self.value(a).len() as u64);
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias[n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias);
        let data: Vec<T> = self
            .data(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        self.elementwise((m * n) as u64);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, kernels::sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = kernels::softmax(self.data(x), outer, len, inner);
        self.elementwise(3 * out.len() as u64);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, len, inner },
            &[x],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len() - 1;
        self.softmax(x, axis)
    }

    /// `x / sqrt(mean(x²) + eps) * gain`, row-wise.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).len() != n {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(1e-6);
        let xs = self.data(x);
        let g = self.data(gain);
        let mut inv = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks(n) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(n as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gv)| v * r * gv));
        }
        self.elementwise(4 * (m * n) as u64);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RmsNorm { x, gain, inv_rms: inv },
            &[x, gain],
        ))
    }

    // ---- convolution and pooling -----------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::contract(format!("conv2d input must be C×H×W, got {s:?}"))),
        };
        let (c_out, kc, k) = match self.shape(kernel) {
            [o, i, kh, kw] if kh == kw => (*o, *i, *kh),
            s => return Err(Error::contract(format!("conv2d kernel must be O×I×k×k, got {s:?}"))),
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(kernel)));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::shape("conv2d bias", self.shape(kernel), self.shape(b)));
            }
        }
        let geom = conv_geometry(c_in, h, w, c_out, k, stride, padding)?;
        let out = kernels::conv2d(
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
            &geom,
        );
        self.macs(geom.macs());
        if bias.is_some() {
            self.elementwise(out.len() as u64);
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new([c_out, geom.h_out, geom.w_out], out)?,
            Op::Conv2d { input, kernel, bias, geom },
            &inputs,
        ))
    }

    /// Non-overlapping `p×p` average pooling of a `C×H×W` tensor.
    pub fn avg_pool(&mut self, x: Var, p: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::contract(format!("avg_pool input must be C×H×W, got {s:?}"))),
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(format!("pool size {p} does not divide {h}×{w}")));
        }
        let (ho, wo) = (h / p, w / p);
        let xs = self.data(x);
        let norm = T::of(1.0 / (p * p) as f64);
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..p {
                        for dx in 0..p {
                            s += xs[(ci * h + oy * p + dy) * w + ox * p + dx];
                        }
                    }
                    out[(ci * ho + oy) * wo + ox] = s * norm;
                }
            }
        }
        self.elementwise((c * h * w) as u64);
        Ok(self.push(
            Tensor::new([c, ho, wo], out)?,
            Op::AvgPool { x, c, h, w, p },
            &[x],
        ))
    }

    /// Mean over the spatial axes of a `C×H×W` tensor, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, hw) = match self.shape(x) {
            [c, h, w] => (*c, h * w),
            s => return Err(Error::contract(format!("global_avg_pool expects C×H×W, got {s:?}"))),
        };
        let xs = self.data(x);
        let out: Vec<T> = (0..c)
            .map(|ci| xs[ci * hw..(ci + 1) * hw].iter().copied().sum::<T>() / T::of(hw as f64))
            .collect();
        self.elementwise((c * hw) as u64);
        Ok(self.push(Tensor::vector(out), Op::GlobalAvgPool { x, c, hw }, &[x]))
    }

    /// Maximum over the spatial axes of a `C×H×W` tensor, giving `[C]`.
    /// The gradient goes to the first maximal position of each channel.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, hw) = match self.shape(x) {
            [c, h, w] => (*c, h * w),
            s => return Err(Error::contract(format!("global_max_pool expects C×H×W, got {s:?}"))),
        };
        let xs = self.data(x);
        let argmax: Vec<usize> = (0..c)
            .map(|ci| ci * hw + crate::numerics::kernels::argmax(&xs[ci * hw..(ci + 1) * hw]))
            .collect();
        let out: Vec<T> = argmax.iter().map(|&i| xs[i]).collect();
        self.elementwise((c * hw) as u64);
        Ok(self.push(Tensor::vector(out), Op::GlobalMaxPool { x, hw, argmax }, &[x]))
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.elementwise(self.value(x).len() as u64);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: T = self.data(x).iter().copied().sum::<T>() / T::of(n as f64);
        self.elementwise(n as u64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `Σ xᵢ wᵢ` with constant weights.
    pub fn dot_const(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::shape("dot_const", self.shape(x), &[w.len()]));
        }
        let s: T = self.data(x).iter().zip(&w).map(|(&a, &b)| a * b).sum();
        self.macs(w.len() as u64);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w: Arc::new(w) }, &[x]))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if target >= n {
            return Err(Error::contract(format!("target class {target} out of range {n}")));
        }
        let probs = kernels::softmax(self.data(logits), 1, n, 1);
        let xs = self.data(logits);
        let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = xs.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let loss = lse - xs[target];
        self.elementwise(3 * n as u64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target, probs },
            &[logits],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::shape("mse", self.shape(x), target.shape()));
        }
        let n = target.len();
        let s: T = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::of(n as f64);
        self.elementwise(3 * n as u64);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse { x, target: Arc::new(target) },
            &[x],
        ))
    }

    // ---- structural -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::contract(format!("row {bad} out of range {m}")));
        }
        let xs = self.data(x);
        let data: Vec<T> = rows.iter().flat_map(|&r| xs[r * n..(r + 1) * n].iter().copied()).collect();
        Ok(self.push(
            Tensor::new([rows.len(), n], data)?,
            Op::Gather { x, rows: rows.to_vec(), cols: n },
            &[x],
        ))
    }

    /// `base` with row `rows[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(base).dims2()?;
        let (r, n2) = self.value(src).dims2()?;
        if n != n2 || r != rows.len() || rows.iter().any(|&i| i >= m) {
            return Err(Error::shape("scatter_rows", self.shape(base), self.shape(src)));
        }
        let mut data = self.data(base).to_vec();
        let s = self.data(src);
        for (i, &row) in rows.iter().enumerate() {
            data[row * n..(row + 1) * n].copy_from_slice(&s[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::new([m, n], data)?,
            Op::ScatterRows { base, src, rows: rows.to_vec(), cols: n },
            &[base, src],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            m += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::new([m, n], data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::contract(format!("columns {start}..{} out of range {n}", start + len)));
        }
        let xs = self.data(x);
        let data: Vec<T> = (0..m).flat_map(|i| xs[i * n + start..i * n + start + len].iter().copied()).collect();
        Ok(self.push(
            Tensor::new([m, len], data)?,
            Op::SliceCols { x, start, len, cols: n },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new([m, n], data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rotary position embedding on `x[m×d]`, with `d` split into heads of
    /// `head_dim` columns. `cos`/`sin` hold `m × head_dim/2` angles' values.
    pub fn rotary(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>, head_dim: usize) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        let half = head_dim / 2;
        if !head_dim.is_multiple_of(2) || d % head_dim != 0 {
            return Err(Error::config(format!("rotary head dim {head_dim} must be even and divide {d}")));
        }
        if cos.len() != m * half || sin.len() != m * half {
            return Err(Error::contract("rotary table size mismatch"));
        }
        let xs = self.data(x);
        let mut out = vec![T::zero(); m * d];
        for i in 0..m {
            for h in 0..d / head_dim {
                for p in 0..half {
                    let (c, s) = (cos[i * half + p], sin[i * half + p]);
                    let a = i * d + h * head_dim + 2 * p;
                    let (x0, x1) = (xs[a], xs[a + 1]);
                    out[a] = x0 * c - x1 * s;
                    out[a + 1] = x0 * s + x1 * c;
                }
            }
        }
        self.elementwise(3 * (m * d) as u64);
        Ok(self.push(
            Tensor::new([m, d], out)?,
            Op::Rotary { x, cos, sin, head_dim },
            &[x],
        ))
    }

    /// Row-wise `mᵢ·aᵢ + (1 − mᵢ)·bᵢ` with `m[n]`, `a,b[n×d]`.
    pub fn row_blend(&mut self, m: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_blend", a, b)?;
        let (n, d) = self.value(a).dims2()?;
        if self.value(m).len() != n {
            return Err(Error::shape("row_blend", self.shape(m), self.shape(a)));
        }
        let (ms, xa, xb) = (self.data(m), self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let w = ms[i];
            let keep = T::one() - w;
            for j in 0..d {
                out.push(w * xa[i * d + j] + keep * xb[i * d + j]);
            }
        }
        self.elementwise(3 * (n * d) as u64);
        Ok(self.push(Tensor::new([n, d], out)?, Op::RowBlend { m, a, b }, &[m, a, b]))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", hard.shape(), self.shape(soft)));
        }
        Ok(self.push(hard, Op::StraightThrough(soft), &[soft]))
    }

    /// A constant copy of `x`; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value_arc(x);
        self.leaf(v, false)
    }

    // ---- backward -----------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, contribution: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.requires_grad(*a) {
                    acc(*a, kernels::matmul_nt(g, self.data(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    acc(*b, kernels::matmul_tn(self.data(*a), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                if self.requires_grad(*a) {
                    acc(*a, kernels::matmul(g, self.data(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    acc(*b, kernels::matmul_tn(g, self.data(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(xb).map(|(&g, &y)| g * y).collect());
                acc(*b, g.iter().zip(xa).map(|(&g, &x)| g * x).collect());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.to_vec());
                let n = self.value(*bias).len();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (o, &x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                acc(*bias, gb);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => acc(*a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect());
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                acc(*a, g.iter().zip(x).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect());
            }
            Op::Sigmoid(a) => {
                acc(*a, g.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect());
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            dot += g[at(j)] * out[at(j)];
                        }
                        for j in 0..*len {
                            gx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let n = self.value(*gain).len();
                let xs = self.data(*x);
                let gs = self.data(*gain);
                let mut gx = vec![T::zero(); xs.len()];
                let mut gg = vec![T::zero(); n];
                let nf = T::of(n as f64);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = &xs[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    // d/dx of x·inv·gain where inv = (mean x² + eps)^-1/2
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += grow[j] * gs[j] * row[j];
                        gg[j] += grow[j] * row[j] * inv;
                    }
                    let coef = dot * inv * inv * inv / nf;
                    for j in 0..n {
                        gx[r * n + j] = grow[j] * gs[j] * inv - row[j] * coef;
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let (gi, gk, gb) =
                    kernels::conv2d_backward(self.data(*input), self.data(*kernel), g, geom);
                acc(*input, gi);
                acc(*kernel, gk);
                if let Some(b) = bias {
                    acc(*b, gb);
                }
            }
            Op::AvgPool { x, c, h, w, p } => {
                let (ho, wo) = (h / p, w / p);
                let norm = T::of(1.0 / (p * p) as f64);
                let mut gx = vec![T::zero(); c * h * w];
                for ci in 0..*c {
                    for y in 0..*h {
                        for xx in 0..*w {
                            gx[(ci * h + y) * w + xx] = g[(ci * ho + y / p) * wo + xx / p] * norm;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::GlobalAvgPool { x, c, hw } => {
                let norm = T::of(1.0 / *hw as f64);
                let gx = (0..c * hw).map(|i| g[i / hw] * norm).collect();
                acc(*x, gx);
            }
            Op::GlobalMaxPool { x, hw, argmax } => {
                let mut gx = vec![T::zero(); argmax.len() * hw];
                for (ci, &i) in argmax.iter().enumerate() {
                    gx[i] = g[ci];
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Dot { x, w } => acc(*x, w.iter().map(|&wi| wi * g[0]).collect()),
            Op::Gather { x, rows, cols } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..*cols {
                        gx[r * cols + j] += g[i * cols + j];
                    }
                }
                acc(*x, gx);
            }
            Op::ScatterRows { base, src, rows, cols } => {
                if self.requires_grad(*base) {
                    let mut gb = g.to_vec();
                    for &r in rows {
                        gb[r * cols..(r + 1) * cols].fill(T::zero());
                    }
                    acc(*base, gb);
                }
                if self.requires_grad(*src) {
                    let gs = rows.iter().flat_map(|&r| g[r * cols..(r + 1) * cols].iter().copied()).collect();
                    acc(*src, gs);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceCols { x, start, len, cols } => {
                let m = self.value(*x).dims2().unwrap().0;
                let mut gx = vec![T::zero(); m * cols];
                for i in 0..m {
                    gx[i * cols + start..i * cols + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let m = self.value(parts[0]).dims2().unwrap().0;
                let total: usize = g.len() / m.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    let gp = (0..m).flat_map(|i| g[i * total + off..i * total + off + w].iter().copied()).collect();
                    acc(p, gp);
                    off += w;
                }
            }
            Op::Rotary { x, cos, sin, head_dim } => {
                let (m, d) = self.value(*x).dims2().unwrap();
                let half = head_dim / 2;
                let mut gx = vec![T::zero(); m * d];
                for i in 0..m {
                    for h in 0..d / head_dim {
                        for p in 0..half {
                            let (c, s) = (cos[i * half + p], sin[i * half + p]);
                            let a = i * d + h * head_dim + 2 * p;
                            let (g0, g1) = (g[a], g[a + 1]);
                            gx[a] = g0 * c + g1 * s;
                            gx[a + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::RowBlend { m, a, b } => {
                let (n, d) = self.value(*a).dims2().unwrap();
                let (ms, xa, xb) = (self.data(*m), self.data(*a), self.data(*b));
                if self.requires_grad(*m) {
                    let gm = (0..n)
                        .map(|i| {
                            let mut s = T::zero();
                            for j in 0..d {
                                s += g[i * d + j] * (xa[i * d + j] - xb[i * d + j]);
                            }
                            s
                        })
                        .collect();
                    acc(*m, gm);
                }
                if self.requires_grad(*a) {
                    acc(*a, (0..n * d).map(|k| g[k] * ms[k / d]).collect());
                }
                if self.requires_grad(*b) {
                    acc(*b, (0..n * d).map(|k| g[k] * (T::one() - ms[k / d])).collect());
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let mut gx: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                gx[*target] = gx[*target] - g[0];
                acc(*logits, gx);
            }
            Op::Mse { x, target } => {
                let n = target.len();
                let c = T::of(2.0 / n as f64) * g[0];
                let gx = self.data(*x).iter().zip(target.data()).map(|(&a, &b)| c * (a - b)).collect();
                acc(*x, gx);
            }
        }
    }
}

pub(crate) fn conv_geometry(
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let span_h = (h + 2 * padding).checked_sub(k);
    let span_w = (w + 2 * padding).checked_sub(k);
    match (span_h, span_w) {
        (Some(sh), Some(sw)) if sh % stride == 0 && sw % stride == 0 => Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out: sh / stride + 1,
            w_out: sw / stride + 1,
        }),
        _ => Err(Error::config(format!(
            "conv2d output size is not integral for {h}×{w}, k={k}, stride={stride}, padding={padding}"
        ))),
    }
}

/// Result of a backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` shaped like its value; exactly zero when unused.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
