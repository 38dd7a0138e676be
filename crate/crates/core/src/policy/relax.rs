use rand::distr::Open01;
use rand::Rng;

use super::masks::{cached_count, rank_mask, CacheMask};
use crate::error::{Error, Result};
use crate::numerics::kernels::argmax;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// `g = −ln(−ln u)` with `u` uniform on the open interval `(0, 1)`.
pub fn sample_gumbel(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    (0..c)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// A discrete ratio choice with its relaxation.
#[derive(Debug, Clone)]
pub struct RatioDecision {
    /// Soft probabilities `p̃`.
    pub soft: Var,
    /// Forward value one-hot `p`, gradient into `p̃`.
    pub ste: Var,
    /// Selected candidate (argmax of `p̃`, lowest index on ties).
    pub index: usize,
    pub tau: f64,
    pub noise: Vec<f64>,
}

/// `p̃ = softmax((l + g)/τ)`, `p = one_hot(argmax p̃)`. `noise = None` is the
/// deterministic mode (`g = 0`).
pub fn gumbel_softmax<T: Scalar>(tape: &mut Tape<T>, logits: Var, tau: f64, noise: Option<&[f64]>) -> Result<RatioDecision> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::contract(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let c = tape.value(logits).len();
    let g: Vec<f64> = match noise {
        Some(g) if g.len() != c => return Err(Error::shape("gumbel noise", &[g.len()], &[c])),
        Some(g) => g.to_vec(),
        None => vec![0.0; c],
    };
    let mut y = logits;
    if noise.is_some() {
        let gv = tape.constant(Tensor::new([c], g.iter().map(|&v| T::of(v)).collect())?);
        y = tape.add(y, gv)?;
    }
    let y = tape.scale(y, T::of(1.0 / tau));
    let soft = tape.softmax(y, 0)?;
    let index = argmax(tape.value(soft).data());
    let mut one_hot = Tensor::zeros([c]);
    one_hot.data_mut()[index] = T::one();
    let ste = tape.straight_through(one_hot, soft)?;
    Ok(RatioDecision { soft, ste, index, tau, noise: g })
}

/// Value-only [`gumbel_softmax`]: returns `(p̃, p)`.
pub fn gumbel_values(logits: &[f64], tau: f64, noise: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::<f64>::inference();
    let l = tape.constant(Tensor::vector(logits.to_vec()));
    let d = gumbel_softmax(&mut tape, l, tau, noise)?;
    Ok((tape.value(d.soft).data().to_vec(), tape.value(d.ste).data().to_vec()))
}

/// `L_ratio = −Σ p̃ʲ rⱼ`.
pub fn ratio_loss<T: Scalar>(tape: &mut Tape<T>, soft: Var, ratios: &[f64]) -> Result<Var> {
    if tape.value(soft).len() != ratios.len() {
        return Err(Error::contract(format!(
            "ratio loss needs {} probabilities, got {}",
            ratios.len(),
            tape.value(soft).len()
        )));
    }
    tape.dot_const(soft, ratios.iter().map(|&r| T::of(-r)).collect())
}

/// Hard top-k mask plus its steep-sigmoid surrogate on the tape.
#[derive(Debug, Clone)]
pub struct SoftMask {
    pub mask: CacheMask,
    /// `M̃ = σ((s − θ_k)/τ_s)`; constant ones when `k = 0`, zeros when `k = N`.
    pub soft: Var,
}

/// Steep-sigmoid mask around the detached threshold `θ_k`.
pub fn soft_mask<T: Scalar>(tape: &mut Tape<T>, scores: Var, k: usize, tau_s: f64) -> Result<SoftMask> {
    if tau_s.is_nan() || tau_s <= 0.0 {
        return Err(Error::contract(format!("mask temperature must be positive, got {tau_s}")));
    }
    let n = tape.value(scores).len();
    let mask = rank_mask(tape.value(scores).data(), k)?;
    let soft = if k == 0 {
        tape.constant(Tensor::full([n], T::one()))
    } else if k == n {
        tape.constant(Tensor::zeros([n]))
    } else {
        let centred = tape.add_scalar(scores, T::of(-mask.theta));
        let steep = tape.scale(centred, T::of(1.0 / tau_s));
        tape.sigmoid(steep)
    };
    Ok(SoftMask { mask, soft })
}

/// The Stage-II mask: the hard mask of the selected ratio in the forward
/// pass, and in the backward pass `Σⱼ pⱼ · M̃ⱼ`, where `M̃ⱼ` is the soft mask
/// for candidate ratio `rⱼ` and `p` is the decision's straight-through
/// one-hot. Scores receive gradient through the selected candidate's soft
/// mask; ratio logits through every candidate's.
pub fn mixed_soft_mask<T: Scalar>(
    tape: &mut Tape<T>,
    scores: Var,
    decision: &RatioDecision,
    ratios: &[f64],
    tau_s: f64,
) -> Result<(CacheMask, Var)> {
    let n = tape.value(scores).len();
    if tape.value(decision.ste).len() != ratios.len() {
        return Err(Error::shape("ratio decision", tape.shape(decision.ste), &[ratios.len()]));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    let mut selected = None;
    for (j, &r) in ratios.iter().enumerate() {
        let sm = soft_mask(tape, scores, cached_count(n, r), tau_s)?;
        rows.push(tape.reshape(sm.soft, [1, n])?);
        if j == decision.index {
            selected = Some(sm.mask);
        }
    }
    let selected = selected.ok_or_else(|| Error::contract("decision index outside the ratio set"))?;
    let stacked = tape.concat_rows(&rows)?;
    let weights = tape.reshape(decision.ste, [1, ratios.len()])?;
    let mix = tape.matmul(weights, stacked)?;
    let mix = tape.reshape(mix, [n])?;
    let hard = Tensor::new([n], selected.hard.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
    let m = tape.straight_through(hard, mix)?;
    Ok((selected, m))
}
