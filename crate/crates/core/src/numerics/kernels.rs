//! Raw loops behind the tape operations. Summation always runs over the
//! reduced index in ascending order, so results are reproducible and a
//! naive triple loop reproduces [`matmul`] bit for bit.

use super::tensor::Scalar;

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`, giving `k×n`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Softmax over the middle axis of an `outer × len × inner` view.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn macs(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k * self.h_out * self.w_out) as u64
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(input: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_out * g.h_out * g.w_out];
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    for co in 0..g.c_out {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = T::zero();
                for ci in 0..g.c_in {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += input[(ci * g.h + iy as usize) * g.w + ix as usize]
                                * kernel[((co * g.c_in + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * g.h_out + oy) * g.w_out + ox] = acc + b;
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gi = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.c_out];
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    for co in 0..g.c_out {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let go = grad_out[(co * g.h_out + oy) * g.w_out + ox];
                gb[co] += go;
                if go == T::zero() {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let ii = (ci * g.h + iy as usize) * g.w + ix as usize;
                            let ki = ((co * g.c_in + ci) * k + ky) * k + kx;
                            gi[ii] += go * kernel[ki];
                            gk[ki] += go * input[ii];
                        }
                    }
                }
            }
        }
    }
    (gi, gk, gb)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
