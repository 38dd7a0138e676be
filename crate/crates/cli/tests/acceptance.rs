//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 6 and 7 decide the exit status. The learning outcomes
//! (criterion 5) depend on a full training run and are reported without
//! failing the process unless `LAC_ACCEPTANCE_STRICT=1` is set.
//! `LAC_ACCEPTANCE_REUSE=1` reuses checkpoints from an earlier run instead of
//! retraining (stage budgets are then not measured).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lac_core::bench::{evaluate, wallclock, Condition, Fixture};
use lac_core::config::RunConfig;
use lac_core::costmodel::{flops_table, policy_cost, CostDims, FlopsReport};
use lac_core::numerics::{assert_grad_close, finite_diff_grad, Scalar, Tape, Tensor, Var};
use lac_core::policy::{
    apply_stochastic_recovery, cached_count, gumbel_softmax, gumbel_values, mixed_soft_mask, sample_gumbel,
    select_cache_mask, soft_mask, Part, PolicyConfig, PolicyNet,
};
use lac_core::rng;
use lac_core::scenegen::{generate_episode, SceneClass, SceneConfig};
use lac_core::training::{mean_ratio_by_class, saliency_auc, train, Stages};
use lac_core::transformer::{attend, permute_kv_check, ModelConfig, Transformer};
use rand::seq::SliceRandom;
use rand::Rng;

const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-5;
const SEEDS: u64 = 20;
const SUITE_BUDGET: Duration = Duration::from_secs(60);

struct Report {
    gating_failures: usize,
    reported_failures: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, gating: bool, text: impl AsRef<str>) {
        self.total += 1;
        if !pass {
            if gating {
                self.gating_failures += 1;
            } else {
                self.reported_failures += 1;
            }
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:<5} {}", text.as_ref());
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1. gradients

type Graph<T> = fn(&mut Tape<T>, Var) -> Var;

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    g32: Graph<f32>,
    g64: Graph<f64>,
    /// Draw inputs with |x| >= 0.1 so no coordinate sits on a kink at 0.
    away_from_zero: bool,
}

fn readout<T: Scalar>(t: &mut Tape<T>, v: Var) -> Var {
    let n = t.value(v).len();
    let w: Vec<T> = (0..n).map(|i| T::of(((i * 37 % 11) as f64 - 5.0) / 7.0)).collect();
    t.dot_const(v, w).unwrap()
}

fn fixed<T: Scalar>(shape: &[usize], f: impl Fn(f64) -> f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| T::of(f(i as f64)))
}

macro_rules! case {
    ($name:expr, $shape:expr, |$t:ident, $x:ident| $body:expr) => {{
        fn g<T: Scalar>($t: &mut Tape<T>, $x: Var) -> Var {
            let y = $body;
            readout($t, y)
        }
        Case { name: $name, shape: $shape.to_vec(), g32: g::<f32>, g64: g::<f64>, away_from_zero: false }
    }};
}

fn primitive_cases() -> Vec<Case> {
    vec![
        case!("matmul", [3, 4], |t, x| {
            let w = t.constant(fixed(&[4, 2], |i| i * 0.3 - 1.0));
            t.matmul(x, w).unwrap()
        }),
        case!("matmul_nt", [3, 4], |t, x| t.matmul_nt(x, x).unwrap()),
        case!("add", [6], |t, x| {
            let c = t.constant(fixed(&[6], |i| i.sin()));
            let y = t.add(x, c).unwrap();
            t.mul(y, y).unwrap()
        }),
        case!("sub", [6], |t, x| {
            let c = t.constant(fixed(&[6], |i| i.cos()));
            let y = t.sub(c, x).unwrap();
            t.mul(y, x).unwrap()
        }),
        case!("mul", [6], |t, x| t.mul(x, x).unwrap()),
        case!("add_row", [4], |t, x| {
            let m = t.constant(fixed(&[3, 4], |i| (i * 0.5).sin()));
            let y = t.add_row(m, x).unwrap();
            t.mul(y, y).unwrap()
        }),
        case!("scale", [5], |t, x| {
            let y = t.scale(x, T::of(-1.7));
            t.mul(y, x).unwrap()
        }),
        case!("add_scalar", [5], |t, x| {
            let y = t.add_scalar(x, T::of(0.4));
            t.mul(y, y).unwrap()
        }),
        Case { away_from_zero: true, ..case!("relu", [12], |t, x| t.relu(x)) },
        case!("gelu", [12], |t, x| t.gelu(x)),
        case!("sigmoid", [12], |t, x| t.sigmoid(x)),
        case!("softmax", [3, 5], |t, x| t.softmax(x, 0).unwrap()),
        case!("softmax_rows", [3, 5], |t, x| t.softmax_rows(x).unwrap()),
        case!("rms_norm", [3, 6], |t, x| {
            let g = t.constant(fixed(&[6], |i| 0.5 + i * 0.1));
            t.rms_norm(x, g).unwrap()
        }),
        case!("rms_norm_gain", [6], |t, x| {
            let h = t.constant(fixed(&[2, 6], |i| i.sin() + 0.2));
            t.rms_norm(h, x).unwrap()
        }),
        case!("conv2d_input", [2, 6, 6], |t, x| {
            let k = t.constant(fixed(&[3, 2, 3, 3], |i| (i * 0.37).sin()));
            let b = t.constant(fixed(&[3], |i| i * 0.1));
            t.conv2d(x, k, Some(b), 1, 1).unwrap()
        }),
        case!("conv2d_kernel", [2, 1, 3, 3], |t, x| {
            let inp = t.constant(fixed(&[1, 5, 5], |i| (i * 0.61).cos()));
            t.conv2d(inp, x, None, 2, 0).unwrap()
        }),
        case!("avg_pool", [2, 4, 4], |t, x| {
            let a = t.avg_pool(x, 2).unwrap();
            t.sigmoid(a)
        }),
        case!("global_avg_pool", [2, 4, 4], |t, x| {
            let g = t.global_avg_pool(x).unwrap();
            t.mul(g, g).unwrap()
        }),
        case!("global_max_pool", [2, 4, 4], |t, x| {
            // offsets keep the maxima apart by more than the input range
            let off = t.constant(fixed(&[2, 4, 4], |i| ((i as usize * 7) % 16) as f64 * 3.0));
            let y = t.add(x, off).unwrap();
            t.global_max_pool(y).unwrap()
        }),
        case!("sum_mean", [7], |t, x| {
            let y = t.mul(x, x).unwrap();
            let s = t.sum(y);
            let m = t.mean(x);
            t.mul(s, m).unwrap()
        }),
        case!("cross_entropy", [7], |t, x| t.cross_entropy(x, 3).unwrap()),
        case!("mse", [7], |t, x| t.mse(x, fixed(&[7], |i| i * 0.1)).unwrap()),
        case!("reshape_slice_gather", [3, 4], |t, x| {
            let r = t.reshape(x, [4, 3]).unwrap();
            let s = t.slice_cols(r, 1, 2).unwrap();
            let g = t.gather_rows(s, &[3, 0, 3]).unwrap();
            t.mul(g, g).unwrap()
        }),
        case!("scatter_rows", [2, 3], |t, x| {
            let base = t.constant(fixed(&[4, 3], |i| i * 0.1));
            let s = t.scatter_rows(base, x, &[3, 1]).unwrap();
            t.mul(s, s).unwrap()
        }),
        case!("concat_rows", [2, 3], |t, x| {
            let y = t.scale(x, T::of(0.5));
            let c = t.concat_rows(&[x, y]).unwrap();
            t.mul(c, c).unwrap()
        }),
        case!("concat_cols", [3, 2], |t, x| {
            let y = t.scale(x, T::of(2.5));
            let c = t.concat_cols(&[x, y]).unwrap();
            t.mul(c, c).unwrap()
        }),
        case!("rotary", [3, 8], |t, x| {
            let cos: Vec<T> = (0..6).map(|i| T::of((i as f64 * 0.7).cos())).collect();
            let sin: Vec<T> = (0..6).map(|i| T::of((i as f64 * 0.7).sin())).collect();
            let r = t.rotary(x, cos, sin, 4).unwrap();
            t.mul(r, x).unwrap()
        }),
        case!("row_blend", [4], |t, x| {
            let a = t.constant(fixed(&[4, 3], |i| (i * 0.9).sin()));
            let b = t.constant(fixed(&[4, 3], |i| (i * 0.4).cos()));
            let m = t.sigmoid(x);
            t.row_blend(m, a, b).unwrap()
        }),
    ]
}

fn check_primitive(case: &Case, seed: u64) -> bool {
    let mut r = rng::stream(seed, 200);
    let x: Tensor<f32> = Tensor::from_fn(case.shape.clone(), |_| {
        let u: f32 = r.random_range(-1.0..1.0);
        if case.away_from_zero {
            u.signum() * (0.1 + 0.9 * u.abs())
        } else {
            u
        }
    });
    let mut t = Tape::<f32>::new();
    let v = t.param(x.clone());
    let loss = (case.g32)(&mut t, v);
    let analytic = t.backward(loss).unwrap().wrt(&t, v);
    let numeric = finite_diff_grad(
        |p: &Tensor<f64>| {
            let mut t = Tape::<f64>::new();
            let v = t.constant(p.clone());
            let l = (case.g64)(&mut t, v);
            t.value(l).data()[0]
        },
        &x.cast::<f64>(),
        1e-3,
    );
    assert_grad_close(&analytic, &numeric, RTOL, ATOL).passed
}

/// Gradient of a random linear readout of one policy module with respect to
/// up to 40 sampled coordinates of each of its parameter tensors.
fn check_policy_part(part: Part, seed: u64) -> bool {
    let net = PolicyNet::init(PolicyConfig::default(), (32, 32, 4), seed).unwrap().cast::<f64>();
    let mut r = rng::stream(seed, 201);
    let v: Tensor<f64> = Tensor::from_fn([5, 32, 32], |_| r.random_range(-1.0..1.0));
    let out_len = if part == Part::Selector { 64 } else { net.config.ratios.len() };
    let w: Vec<f64> = (0..out_len).map(|_| r.random_range(-1.0..1.0)).collect();
    let eval = |net: &PolicyNet<f64>, tape: &mut Tape<f64>| {
        let p = net.bind(tape, &[part]);
        let x = tape.constant(v.clone());
        let y = match part {
            Part::Selector => net.selector_forward(tape, &p, x).unwrap(),
            Part::Predictor => net.predictor_forward(tape, &p, x).unwrap(),
        };
        (p, tape.dot_const(y, w.clone()).unwrap())
    };
    let mut tape = Tape::new();
    let (p, loss) = eval(&net, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut pick = rng::stream(seed, 202);
    let ok = p.iter().filter(|(n, _)| n.starts_with(part.prefix())).all(|(name, var)| {
        let analytic = grads.wrt(&tape, var);
        let len = analytic.len();
        let coords: Vec<usize> = (0..len.min(40)).map(|_| pick.random_range(0..len)).collect();
        let loss_at = |i: usize, delta: f64| {
            let mut probe = net.clone();
            probe.params.get_mut(name).unwrap().data_mut()[i] += delta;
            let mut t = Tape::inference();
            let (_, l) = eval(&probe, &mut t);
            t.value(l).data()[0]
        };
        let eps = 1e-6;
        let numeric = Tensor::vector(coords.iter().map(|&i| (loss_at(i, eps) - loss_at(i, -eps)) / (2.0 * eps)).collect());
        let analytic = Tensor::vector(coords.iter().map(|&i| analytic.data()[i]).collect());
        assert_grad_close(&analytic, &numeric, RTOL, ATOL).passed
    });
    ok
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let cases = primitive_cases();
    let mut failed: Vec<String> = Vec::new();
    for case in &cases {
        if let Some(s) = (0..SEEDS).find(|&s| !check_primitive(case, s)) {
            failed.push(format!("{} (seed {s})", case.name));
        }
    }
    for (part, name) in [(Part::Selector, "selector"), (Part::Predictor, "predictor")] {
        if let Some(s) = (0..SEEDS).find(|&s| !check_policy_part(part, s)) {
            failed.push(format!("{name} (seed {s})"));
        }
    }
    let took = start.elapsed();
    let pass = failed.is_empty() && took < SUITE_BUDGET;
    rep.line(
        "1",
        pass,
        true,
        format!(
            "gradient suite: {} primitives + selector + predictor, {SEEDS} seeds, rtol {RTOL:e} atol {ATOL:e}; failures {failed:?}; {} (budget 60 s)",
            cases.len(),
            secs(took)
        ),
    );
}

// ---------------------------------------------------- 2. cache equivalence

fn episode_frames(class: SceneClass, seed: u64) -> Vec<Tensor<f32>> {
    let cfg = SceneConfig { classes: vec![class], ..SceneConfig::default() };
    generate_episode(&cfg, seed).unwrap().frames.iter().map(|f| f.to_tensor()).collect()
}

fn criterion_2(rep: &mut Report) {
    let start = Instant::now();
    let mut worst_a = 0.0f64;
    let mut worst_b = 0.0f64;
    let mut worst_c = 0.0f64;
    let mut mask_rng = rng::stream(0, 210);
    for seed in 0..SEEDS {
        let model = Transformer::init(ModelConfig::default(), seed).unwrap();
        let fs = episode_frames(SceneClass::Fast, seed);
        let first = model.full_forward(&fs[0], None, 0).unwrap();
        let full = model.full_forward(&fs[1], Some(&first.cache), 1).unwrap();
        let part = model.partial_forward(&fs[1], &[true; 64], &first.cache, 1).unwrap();
        for (a, b) in full.logits.iter().zip(&part.logits) {
            worst_a = worst_a.max((a - b).abs() as f64);
        }
        for l in 0..model.config().layers {
            worst_a = worst_a.max(full.cache.keys[l].max_abs_diff(&part.cache.keys[l]));
            worst_a = worst_a.max(full.cache.values[l].max_abs_diff(&part.cache.values[l]));
        }

        let still = &fs[4];
        let prev = model.full_forward(still, None, 0).unwrap();
        let again = model.full_forward(still, Some(&prev.cache), 1).unwrap();
        let p: f64 = mask_rng.random_range(0.0..1.0);
        let mask: Vec<bool> = (0..64).map(|_| mask_rng.random_bool(p)).collect();
        let cached = model.partial_forward(still, &mask, &prev.cache, 1).unwrap();
        for (a, b) in cached.logits.iter().zip(&again.logits) {
            worst_b = worst_b.max(((a - b).abs() / b.abs().max(1e-6)) as f64);
        }

        // in f64 so the comparison measures the permutation, not f32 summation order
        let cache = first.cache.cast::<f64>();
        let query = Tensor::from_fn([3, model.config().dim], |i| ((i as f64) * 0.13 + seed as f64).cos());
        let base = attend(&query, &cache.keys[1], &cache.values[1], model.config().heads).unwrap();
        let mut perm: Vec<usize> = (0..64).collect();
        perm.shuffle(&mut rng::stream(seed, 211));
        let got = permute_kv_check(&cache, 1, &query, &perm, model.config().heads).unwrap();
        worst_c = worst_c.max(got.max_abs_diff(&base));
    }
    let took = start.elapsed();
    rep.line(
        "2",
        worst_a <= 1e-6 && worst_b <= 1e-5 && worst_c <= 1e-6 && took < SUITE_BUDGET,
        true,
        format!(
            "cache equivalence over {SEEDS} seeds: (a) all-ones mask max |Δ| {worst_a:.2e} (atol 1e-6); (b) static frames max rel {worst_b:.2e} (rtol 1e-5); (c) K/V permutation max |Δ| {worst_c:.2e} (1e-6); {}",
            secs(took)
        ),
    );
}

// --------------------------------------------------------------- 3. cost

fn criterion_3(rep: &mut Report) {
    let start = Instant::now();
    let policy = PolicyConfig::default();
    let frame = generate_episode(&SceneConfig::default(), 4).unwrap().frames[5].to_tensor();
    let sizes = [
        ModelConfig::default(),
        ModelConfig { dim: 128, ffn: 512, layers: 4, ..ModelConfig::default() },
    ];
    let mut worst = 0.0f64;
    let mut exact = true;
    for cfg in &sizes {
        let model = Transformer::init(cfg.clone(), 3).unwrap();
        for r in flops_table(&model, &policy, &frame, &policy.ratios).unwrap() {
            worst = worst.max(r.relative_error.unwrap());
            exact &= r.matmul_exact() == Some(true);
        }
    }
    let small = &sizes[0];
    let dims = CostDims::new(small, &policy);
    let c_policy = policy_cost(&policy, small.height, small.width);
    let deltas: Vec<i64> = [0.2, 0.4, 0.6, 0.8].iter().map(|&r| FlopsReport::analytic(dims, r, c_policy).delta_total).collect();
    let positive = deltas.iter().all(|&d| d > 0);
    let took = start.elapsed();
    rep.line(
        "3",
        worst <= 0.05 && exact && positive && took < SUITE_BUDGET,
        true,
        format!(
            "cost model: rho in {:?}, 2 model sizes: max layer-FLOP error {:.2}% (<= 5%), matmul MACs exact: {exact}; dFLOPs_total at rho 0.2..0.8 = {deltas:?}; {}",
            policy.ratios,
            worst * 100.0,
            secs(took)
        ),
    );
}

// ---------------------------------------------------------- 4. Gumbel/STE

fn criterion_4(rep: &mut Report) {
    let start = Instant::now();
    let ratios = PolicyConfig::default().ratios;
    let mut notes = Vec::new();

    let mut norm_err = 0.0f64;
    let mut sharp_min = 1.0f64;
    let mut determinism = true;
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 220);
        let logits: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
        let tau: f64 = r.random_range(0.05..3.0);
        let g = sample_gumbel(&mut r, 5);
        let (soft, _) = gumbel_values(&logits, tau, Some(&g)).unwrap();
        norm_err = norm_err.max((soft.iter().sum::<f64>() - 1.0).abs());
        let (soft, hard) = gumbel_values(&logits, 0.01, Some(&g)).unwrap();
        let i = hard.iter().position(|&v| v == 1.0).unwrap();
        sharp_min = sharp_min.min(soft[i]);
        let a = gumbel_values(&logits, tau, None).unwrap();
        let b = gumbel_values(&logits, tau, None).unwrap();
        let best = lac_core::numerics::kernels::argmax(&logits);
        determinism &= a == b && a.1[best] == 1.0;
    }
    let p1 = norm_err <= 1e-6;
    let p2 = sharp_min > 1.0 - 1e-3;
    notes.push(format!("sum(p~) err {norm_err:.1e}; tau=0.01 max entry >= {sharp_min:.6}; noise-off deterministic: {determinism}"));

    let tau = 0.7;
    let tau_s = 0.1;
    let mut ste_ok = true;
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 221);
        let scores: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
        let logits: Vec<f64> = (0..ratios.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::vector(logits.clone()));
        let s = tape.param(Tensor::vector(scores.clone()));
        let d = gumbel_softmax(&mut tape, l, tau, None).unwrap();
        let one_hot: Vec<f64> = (0..ratios.len()).map(|j| if j == d.index { 1.0 } else { 0.0 }).collect();
        ste_ok &= tape.value(d.ste).data() == &one_hot[..];
        let (hard, m) = mixed_soft_mask(&mut tape, s, &d, &ratios, tau_s).unwrap();
        let expected: Vec<f64> = hard.hard.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        ste_ok &= tape.value(m).data() == &expected[..];
        let loss = tape.dot_const(m, w.clone()).unwrap();
        let g = tape.backward(loss).unwrap();
        // independent soft path: Σⱼ softmax(l/τ)ⱼ · ⟨w, σ((s − θⱼ)/τ_s)⟩ with θⱼ fixed
        let c: Vec<f64> = ratios
            .iter()
            .map(|&rho| {
                let k = cached_count(16, rho);
                if k == 0 {
                    return w.iter().sum();
                }
                let mut sorted = scores.clone();
                sorted.sort_by(f64::total_cmp);
                let theta = 0.5 * (sorted[k - 1] + sorted[k]);
                scores.iter().zip(&w).map(|(s, w)| w / (1.0 + (-(s - theta) / tau_s).exp())).sum()
            })
            .collect();
        let numeric = finite_diff_grad(
            |x| {
                let mx = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.data().iter().map(|v| ((v - mx) / tau).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().zip(&c).map(|(a, b)| a / z * b).sum()
            },
            &Tensor::vector(logits),
            1e-6,
        );
        ste_ok &= assert_grad_close(&g.wrt(&tape, l), &numeric, RTOL, 1e-8).passed;
    }
    notes.push(format!("STE forward hard / backward soft (rtol 1e-4): {ste_ok}"));

    let mut mono = true;
    let mut k_exact = true;
    let mut consistency = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 222);
        let n = 30;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        for &rho in &ratios {
            let k = cached_count(n, rho);
            let mut tape = Tape::<f64>::inference();
            let sv = tape.constant(Tensor::vector(scores.clone()));
            let sm = soft_mask(&mut tape, sv, k, 0.1).unwrap();
            let soft = tape.value(sm.soft).data().to_vec();
            k_exact &= sm.mask.hard.iter().filter(|&&b| !b).count() == k && sm.mask.k == k;
            k_exact &= select_cache_mask(&scores, rho, n).unwrap().k == k;
            for i in 0..n {
                for j in 0..n {
                    if scores[i] > scores[j] && soft[i] < soft[j] {
                        mono = false;
                    }
                }
            }
            let sharp = soft_mask(&mut tape, sv, k, 1e-4).unwrap();
            for (v, &h) in tape.value(sharp.soft).data().iter().zip(&sharp.mask.hard) {
                consistency = consistency.max((v - if h { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    notes.push(format!("soft mask monotone: {mono}; k-count exact: {k_exact}; |M~ - M| at tau_s=1e-4: {consistency:.1e}"));

    let p = 0.1;
    let trials = 20u64;
    let rows = 50usize;
    let scores: Vec<f64> = (0..2 * rows).map(|i| i as f64).collect();
    let base = select_cache_mask(&scores, 0.5, 2 * rows).unwrap();
    let mut flips = 0usize;
    let mut recovery_monotone = true;
    for seed in 0..trials {
        let mut r = rng::stream(seed, rng::salt::RECOVERY);
        let m = apply_stochastic_recovery(&base, p, &mut r).unwrap();
        recovery_monotone &= base.hard.iter().zip(&m.hard).all(|(&b, &a)| !b || a);
        flips += base.k - m.k;
    }
    let n = (trials as usize * rows) as f64;
    let (mean, sd) = (n * p, (n * p * (1.0 - p)).sqrt());
    let in_bound = (flips as f64 - mean).abs() <= 3.0 * sd;
    notes.push(format!("recovery flips {flips} vs {mean:.0} ± {:.1} (3 sigma); recomputed rows kept: {recovery_monotone}", 3.0 * sd));

    let took = start.elapsed();
    let pass = p1 && p2 && determinism && ste_ok && mono && k_exact && consistency < 1e-3 && in_bound && recovery_monotone && took < SUITE_BUDGET;
    rep.line("4", pass, true, format!("Gumbel/STE suite: {}; {}", notes.join("; "), secs(took)));
}

// ------------------------------------------------------------ 5. learning

struct Timings {
    pretrain: Option<Duration>,
    stage1: Option<Duration>,
    stage2: Option<Duration>,
}

fn run_pipeline(cfg: &RunConfig, reuse: bool) -> Timings {
    let have = cfg.backbone_path().exists() && cfg.stage1_path().exists() && cfg.policy_path().exists();
    if reuse && have {
        println!("       reusing checkpoints in {}", cfg.out_dir.display());
        return Timings { pretrain: None, stage1: None, stage2: None };
    }
    let mut log = |row: &lac_core::training::MetricRow| {
        if row.accuracy.is_some() || row.saliency_auc.is_some() {
            println!(
                "       {} epoch {}: accuracy {:?} auc {:?} ratios {:?}/{:?}/{:?}",
                row.stage, row.epoch, row.accuracy, row.saliency_auc, row.ratio_static, row.ratio_slow, row.ratio_fast
            );
        }
    };
    let mut time = |stages: Stages| {
        let t = Instant::now();
        train(cfg, stages, &mut log).unwrap();
        Some(t.elapsed())
    };
    let none = Stages { pretrain: false, stage1: false, stage2: false };
    Timings {
        pretrain: time(Stages { pretrain: true, ..none }),
        stage1: time(Stages { stage1: true, ..none }),
        stage2: time(Stages { stage2: true, ..none }),
    }
}

fn criterion_5(rep: &mut Report, cfg: &RunConfig, timings: &Timings, strict: bool) -> Fixture {
    let budget = |d: Option<Duration>, limit: u64| d.map(|d| (d.as_secs_f64() <= limit as f64, secs(d)));
    let parts = [
        ("pretrain", budget(timings.pretrain, 600), 600),
        ("Stage I", budget(timings.stage1, 120), 120),
        ("Stage II", budget(timings.stage2, 600), 600),
    ];
    let measured = parts.iter().all(|(_, b, _)| b.is_some());
    let within = parts.iter().all(|(_, b, _)| b.as_ref().is_none_or(|(ok, _)| *ok));
    let text: Vec<String> = parts
        .iter()
        .map(|(name, b, limit)| match b {
            Some((_, t)) => format!("{name} {t} (<= {limit} s)"),
            None => format!("{name} not measured (reused)"),
        })
        .collect();
    rep.line("5", within && measured, strict, format!("pipeline budgets: {}", text.join(", ")));

    let fx = Fixture::load(cfg).unwrap();
    let exec = cfg.execution();

    let auc = saliency_auc(&fx.policy, &fx.episodes, exec).unwrap().unwrap_or(0.0);
    rep.line(
        "5a",
        auc >= 0.85,
        strict,
        format!("selector saliency AUC vs ground-truth motion masks on {} held-out episodes: {auc:.4} (>= 0.85)", fx.episodes.len()),
    );

    let [stat, slow, fast] = mean_ratio_by_class(&fx.policy, &fx.episodes, exec).unwrap();
    let (s, f) = (stat.unwrap_or(f64::NAN), fast.unwrap_or(f64::NAN));
    rep.line(
        "5b",
        s > f,
        strict,
        format!("mean selected ratio static {s:.4} > fast {f:.4} (slow {:.4})", slow.unwrap_or(f64::NAN)),
    );

    let seed = rng::mix(cfg.seed, rng::salt::BENCH);
    let distractor: Vec<_> = fx.episodes.iter().filter(|e| e.distractor.is_some()).cloned().collect();
    let rho = 0.4;
    let learned = evaluate(&fx.model, Some(&fx.policy), &Condition::learned("lac_fixed", Some(rho), false), &distractor, seed, exec).unwrap();
    let rule = evaluate(&fx.model, None, &Condition::rule_based(rho), &distractor, seed, exec).unwrap();
    rep.line(
        "5c",
        distractor.len() >= 200 && learned.accuracy() >= rule.accuracy(),
        strict,
        format!(
            "forced rho 0.4 on {} distractor episodes: learned {:.4} >= rule-based {:.4}",
            distractor.len(),
            learned.accuracy(),
            rule.accuracy()
        ),
    );

    let base = fx.evaluate(cfg, &Condition::baseline()).unwrap();
    let no_rec = fx.evaluate(cfg, &Condition::learned("lac_no_recovery", None, false)).unwrap();
    let lac = fx.evaluate(cfg, &Condition::learned("lac", None, true)).unwrap();
    let gap = base.accuracy() - lac.accuracy();
    rep.line(
        "5d",
        gap <= 0.02 && lac.mean_ratio >= 0.2,
        strict,
        format!(
            "adaptive LAC accuracy {:.4} vs baseline {:.4} (gap {:.2} pp <= 2) at mean rho {:.3} (>= 0.2)",
            lac.accuracy(),
            base.accuracy(),
            gap * 100.0,
            lac.mean_ratio
        ),
    );

    let fixed = fx.evaluate(cfg, &Condition::learned("lac_fixed", Some(cfg.bench.fixed_ratio), false)).unwrap();
    let rows = [
        ("full recompute", &base),
        ("+selector (fixed rho)", &fixed),
        ("+predictor (adaptive)", &no_rec),
        ("+recovery", &lac),
    ];
    let table: Vec<String> = rows
        .iter()
        .map(|(n, e)| format!("{n}: acc {:.4} rho {:.3} flops {:.0}", e.accuracy(), e.mean_ratio, e.analytic_flops))
        .collect();
    let mut flags = Vec::new();
    for w in rows[1..].windows(2) {
        if w[1].1.accuracy() < w[0].1.accuracy() {
            flags.push(format!("VIOLATED acc({}) < acc({})", w[1].0, w[0].0));
        }
    }
    if lac.analytic_flops >= base.analytic_flops {
        flags.push("VIOLATED LAC FLOPs >= baseline".into());
    }
    rep.line(
        "5e",
        true,
        strict,
        format!("ablation ordering measured: {}; flags: {}", table.join(" | "), if flags.is_empty() { "none".into() } else { flags.join(", ") }),
    );
    fx
}

// ------------------------------------------------------------ 6. wall-clock

fn criterion_6(rep: &mut Report, cfg: &RunConfig, fx: &Fixture) {
    let steps = cfg.bench.wallclock_steps.max(100);
    let conds = [Condition::baseline(), Condition::learned("lac_fixed", Some(0.5), false)];
    let ms = wallclock(&fx.model, Some(&fx.policy), &conds, &fx.episodes, cfg.bench.warmup_steps.max(10), steps, cfg.seed).unwrap();
    rep.line(
        "6",
        ms[1] < ms[0],
        true,
        format!("median step latency over {steps} interleaved steps: forced rho 0.5 {:.4} ms < baseline {:.4} ms ({:.2}x)", ms[1], ms[0], ms[0] / ms[1]),
    );
}

// ----------------------------------------------------------- 7. determinism

fn lac(args: &[&str]) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_lac")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("lac {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

fn without_column(csv: &str, column: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let skip = header.iter().position(|h| *h == column);
    std::iter::once(header.join(","))
        .chain(lines.map(|l| l.split(',').enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, v)| v).collect::<Vec<_>>().join(",")))
        .collect()
}

fn criterion_7(rep: &mut Report, cfg_path: &Path, run_dir: &Path, scratch: &Path) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let read = |p: PathBuf| std::fs::read(&p).unwrap_or_default();

    let (a, b) = (scratch.join("a.bin"), scratch.join("b.bin"));
    let gen = lac(&["gen", "--seed", "42", "--out", &s(&a)]) && lac(&["gen", "--seed", "42", "--out", &s(&b)]) && read(a) == read(b);

    let tiny = scratch.join("tiny.json");
    std::fs::write(
        &tiny,
        r#"{ "data": { "train_episodes": 8, "heldout_episodes": 6, "validation_episodes": 4 },
             "pretrain": { "epochs": 1 }, "stage1": { "epochs": 1, "episodes": 8 },
             "stage2": { "epochs": 1, "episodes": 8 } }"#,
    )
    .unwrap();
    let (ta, tb) = (scratch.join("train_a"), scratch.join("train_b"));
    let mut train_ok = lac(&["train", "--config", &s(&tiny), "--out", &s(&ta)]) && lac(&["train", "--config", &s(&tiny), "--out", &s(&tb)]);
    for f in ["backbone.ckpt", "policy_stage1.ckpt", "policy.ckpt", "metrics.csv"] {
        train_ok &= read(ta.join(f)) == read(tb.join(f)) && !read(ta.join(f)).is_empty();
    }

    let out = s(run_dir);
    let cfg = s(cfg_path);
    let eval_once = || {
        lac(&["eval", "--config", &cfg, "--out", &out]);
        read(run_dir.join("eval.json"))
    };
    let (e1, e2) = (eval_once(), eval_once());
    let eval = !e1.is_empty() && e1 == e2;

    let bench_once = || {
        lac(&["bench", "--config", &cfg, "--out", &out]);
        without_column(&std::fs::read_to_string(run_dir.join("bench.csv")).unwrap_or_default(), "wallclock_ms")
    };
    let (b1, b2) = (bench_once(), bench_once());
    let bench = b1.len() > 1 && b1 == b2;

    rep.line(
        "7",
        gen && train_ok && eval && bench,
        true,
        format!(
            "bitwise reruns: gen {gen}, train {train_ok} (checkpoints + metrics, reduced config), eval {eval} (eval.json), bench {bench} (bench.csv without wallclock_ms)"
        ),
    );
}

fn main() {
    let strict = std::env::var("LAC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let reuse = std::env::var("LAC_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1");
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let run_dir = root.join("run");
    let scratch = root.join("scratch");
    std::fs::create_dir_all(&run_dir).unwrap();
    let _ = std::fs::remove_dir_all(&scratch);
    std::fs::create_dir_all(&scratch).unwrap();

    let mut cfg = RunConfig::default();
    cfg.out_dir = run_dir.clone();
    let cfg_path = root.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let mut rep = Report { gating_failures: 0, reported_failures: 0, total: 0 };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_4(&mut rep);
    let timings = run_pipeline(&cfg, reuse);
    let fx = criterion_5(&mut rep, &cfg, &timings, strict);
    criterion_6(&mut rep, &cfg, &fx);
    criterion_7(&mut rep, &cfg_path, &run_dir, &scratch);

    let failed = rep.gating_failures + rep.reported_failures;
    println!(
        "acceptance: {}/{} criteria passed ({} gating failures, {} reported-only failures)",
        rep.total - failed,
        rep.total,
        rep.gating_failures,
        rep.reported_failures
    );
    if rep.gating_failures > 0 {
        std::process::exit(1);
    }
}
