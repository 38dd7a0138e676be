use lac_core::numerics::{assert_grad_close, finite_diff_grad, kernels, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0f32..2.0))
}

/// Naive triple loop, inner index ascending.
fn triple_loop(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f32;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut t = Tape::<f32>::new();
    let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let c = t.matmul(i, b).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let r = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let col = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let d = t.matmul(r, col).unwrap();
    assert_eq!(t.value(d).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_matches_triple_loop_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let a = rand_tensor(&mut rng, &[4, 4]);
        let b = rand_tensor(&mut rng, &[4, 4]);
        let got = kernels::matmul(a.data(), b.data(), 4, 4, 4);
        assert_eq!(got, triple_loop(a.data(), b.data(), 4, 4, 4));
    }
    let a = rand_tensor(&mut rng, &[7, 13]);
    let b = rand_tensor(&mut rng, &[13, 5]);
    assert_eq!(kernels::matmul(a.data(), b.data(), 7, 13, 5), triple_loop(a.data(), b.data(), 7, 13, 5));
}

#[test]
fn matmul_records_two_flops_per_mac() {
    let mut t = Tape::<f32>::inference().with_counting();
    let a = t.constant(Tensor::zeros([3, 4]));
    let b = t.constant(Tensor::zeros([4, 5]));
    t.matmul(a, b).unwrap();
    assert_eq!(t.flops().unwrap().total_flops(), 2 * 3 * 4 * 5);
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let y = t.softmax(x, 0).unwrap();
    // e/(e+e²), e²/(e+e²)
    let e1 = 1f64.exp();
    let e2 = 2f64.exp();
    let want = [e1 / (e1 + e2), e2 / (e1 + e2)];
    assert!((want[0] - 0.26894).abs() < 1e-5 && (want[1] - 0.73106).abs() < 1e-5);
    for (g, w) in t.value(y).data().iter().zip(want) {
        assert!((*g as f64 - w).abs() < 1e-5);
    }
    let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn softmax_along_axis_zero_of_matrix() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_rows(&[vec![0.0, 5.0], vec![0.0, -5.0]]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    let v = t.value(y);
    assert!((v.get(&[0, 0]) - 0.5).abs() < 1e-7);
    assert!((v.get(&[0, 1]) + v.get(&[1, 1]) - 1.0).abs() < 1e-6);
    assert!(t.softmax(x, 2).is_err());
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::<f32>::new();
    let ones = t.constant(Tensor::full([1, 3, 3], 1.0));
    let k1 = t.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let y = t.conv2d(ones, k1, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &Tensor::full([1, 3, 3], 1.0));

    let mut impulse = Tensor::zeros([1, 3, 3]);
    impulse.data_mut()[4] = 1.0;
    impulse.data_mut()[0] = 0.5;
    let x = t.constant(impulse.clone());
    let avg = t.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
    let y = t.conv2d(x, avg, None, 1, 1).unwrap();
    // sliding-window oracle with zero padding
    for oy in 0..3i32 {
        for ox in 0..3i32 {
            let mut s = 0.0f32;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (iy, ix) = (oy + dy, ox + dx);
                    if (0..3).contains(&iy) && (0..3).contains(&ix) {
                        s += impulse.data()[(iy * 3 + ix) as usize] / 9.0;
                    }
                }
            }
            assert!((t.value(y).get(&[0, oy as usize, ox as usize]) - s).abs() < 1e-7);
        }
    }

    let zk = t.constant(Tensor::zeros([2, 1, 3, 3]));
    let y = t.conv2d(x, zk, None, 1, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros([1, 32, 32]));
    let k = t.constant(Tensor::zeros([1, 1, 3, 3]));
    assert!(t.conv2d(x, k, None, 2, 1).is_err());
    assert!(t.conv2d(x, k, None, 1, 1).is_ok());
}

#[test]
fn backward_simple_cases() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unused() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = t.param(Tensor::vector(vec![5.0]));
    let y = t.scale(x, 2.0);
    assert!(t.backward(y).is_err());
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(&t, unused).data(), &[0.0]);
}

/// Builds a loss on a fresh tape at the requested precision.
type Graph<T> = fn(&mut Tape<T>, lac_core::numerics::Var) -> lac_core::numerics::Var;

fn check_op(name: &str, shape: &[usize], graph32: Graph<f32>, graph64: Graph<f64>, seeds: u64) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let x = rand_tensor(&mut rng, shape);
        let mut t = Tape::<f32>::new();
        let v = t.param(x.clone());
        let loss = graph32(&mut t, v);
        let analytic = t.backward(loss).unwrap().wrt(&t, v);
        let numeric = finite_diff_grad(
            |p: &Tensor<f64>| {
                let mut t = Tape::<f64>::new();
                let v = t.constant(p.clone());
                let l = graph64(&mut t, v);
                t.value(l).data()[0]
            },
            &x.cast::<f64>(),
            1e-3,
        );
        let report = assert_grad_close(&analytic, &numeric, 1e-4, 1e-5);
        assert!(report.passed, "{name} seed {seed}: {report:?}");
    }
}

/// Fixed pseudo-random readout weights so every output coordinate matters.
fn readout<T: lac_core::numerics::Scalar>(t: &mut Tape<T>, v: lac_core::numerics::Var) -> lac_core::numerics::Var {
    let n = t.value(v).len();
    let w: Vec<T> = (0..n).map(|i| T::of(((i * 37 % 11) as f64 - 5.0) / 7.0)).collect();
    t.dot_const(v, w).unwrap()
}

macro_rules! gradcheck {
    ($name:ident, $shape:expr, |$t:ident, $x:ident| $body:expr) => {
        #[test]
        fn $name() {
            fn g32($t: &mut Tape<f32>, $x: lac_core::numerics::Var) -> lac_core::numerics::Var {
                let y = $body;
                readout($t, y)
            }
            fn g64($t: &mut Tape<f64>, $x: lac_core::numerics::Var) -> lac_core::numerics::Var {
                let y = $body;
                readout($t, y)
            }
            check_op(stringify!($name), &$shape, g32, g64, 20);
        }
    };
}

gradcheck!(grad_matmul, [3, 4], |t, x| {
    let w = t.constant(Tensor::from_fn([4, 2], |i| ((i as f64) * 0.3 - 1.0).into_scalar()));
    let a = t.matmul(x, w).unwrap();
    let b = t.matmul_nt(x, x).unwrap();
    let s = t.sum(b);
    let s = t.reshape(s, [1, 1]).unwrap();
    let a0 = t.slice_cols(a, 0, 1).unwrap();
    let a0 = t.gather_rows(a0, &[0]).unwrap();
    t.add(a0, s).unwrap()
});
gradcheck!(grad_softmax_rows, [3, 5], |t, x| t.softmax_rows(x).unwrap());
gradcheck!(grad_softmax_axis0, [3, 5], |t, x| t.softmax(x, 0).unwrap());
gradcheck!(grad_gelu, [12], |t, x| t.gelu(x));
gradcheck!(grad_sigmoid, [12], |t, x| t.sigmoid(x));
gradcheck!(grad_relu, [12], |t, x| {
    let y = t.add_scalar(x, 0.05.into_scalar());
    t.relu(y)
});
gradcheck!(grad_rms_norm, [3, 6], |t, x| {
    let g = t.constant(Tensor::from_fn([6], |i| (0.5 + i as f64 * 0.1).into_scalar()));
    t.rms_norm(x, g).unwrap()
});
gradcheck!(grad_rms_norm_gain, [6], |t, x| {
    let h = t.constant(Tensor::from_fn([2, 6], |i| ((i as f64).sin() + 0.2).into_scalar()));
    t.rms_norm(h, x).unwrap()
});
gradcheck!(grad_conv2d_input, [2, 6, 6], |t, x| {
    let k = t.constant(Tensor::from_fn([3, 2, 3, 3], |i| ((i as f64 * 0.37).sin()).into_scalar()));
    let b = t.constant(Tensor::from_fn([3], |i| (i as f64 * 0.1).into_scalar()));
    t.conv2d(x, k, Some(b), 1, 1).unwrap()
});
gradcheck!(grad_conv2d_kernel, [2, 1, 3, 3], |t, x| {
    let inp = t.constant(Tensor::from_fn([1, 5, 5], |i| ((i as f64 * 0.61).cos()).into_scalar()));
    t.conv2d(inp, x, None, 2, 0).unwrap()
});
gradcheck!(grad_pools, [2, 4, 4], |t, x| {
    let a = t.avg_pool(x, 2).unwrap();
    let g = t.global_avg_pool(x).unwrap();
    let a = t.reshape(a, [8]).unwrap();
    let a = t.sigmoid(a);
    let g = t.sigmoid(g);
    let ga = t.reshape(g, [1, 2]).unwrap();
    let aa = t.reshape(a, [4, 2]).unwrap();
    t.concat_rows(&[aa, ga]).unwrap()
});
gradcheck!(grad_global_max_pool, [2, 4, 4], |t, x| {
    // offsets separate the candidates by more than the input range
    let off = t.constant(Tensor::from_fn([2, 4, 4], |i| (((i * 7) % 16) as f64 * 3.0).into_scalar()));
    let y = t.add(x, off).unwrap();
    t.global_max_pool(y).unwrap()
});
gradcheck!(grad_rotary, [3, 8], |t, x| {
    let cos: Vec<_> = (0..6).map(|i| ((i as f64) * 0.7).cos().into_scalar()).collect();
    let sin: Vec<_> = (0..6).map(|i| ((i as f64) * 0.7).sin().into_scalar()).collect();
    let r = t.rotary(x, cos, sin, 4).unwrap();
    t.mul(r, x).unwrap()
});
gradcheck!(grad_row_blend, [4], |t, x| {
    let a = t.constant(Tensor::from_fn([4, 3], |i| ((i as f64) * 0.9).sin().into_scalar()));
    let b = t.constant(Tensor::from_fn([4, 3], |i| ((i as f64) * 0.4).cos().into_scalar()));
    let m = t.sigmoid(x);
    t.row_blend(m, a, b).unwrap()
});
gradcheck!(grad_scatter_concat, [2, 3], |t, x| {
    let base = t.constant(Tensor::from_fn([4, 3], |i| (i as f64 * 0.1).into_scalar()));
    let s = t.scatter_rows(base, x, &[3, 1]).unwrap();
    t.mul(s, s).unwrap()
});
gradcheck!(grad_cross_entropy, [7], |t, x| {
    let l = t.cross_entropy(x, 3).unwrap();
    let y = t.mse(x, Tensor::from_fn([7], |i| (i as f64 * 0.1).into_scalar())).unwrap();
    let s = t.add(l, y).unwrap();
    let m = t.mean(x);
    t.sub(s, m).unwrap()
});
gradcheck!(grad_concat_cols, [3, 2], |t, x| {
    let y = t.scale(x, 2.5.into_scalar());
    let c = t.concat_cols(&[x, y]).unwrap();
    t.mul(c, c).unwrap()
});

trait IntoScalar {
    fn into_scalar<T: lac_core::numerics::Scalar>(self) -> T;
}
impl IntoScalar for f64 {
    fn into_scalar<T: lac_core::numerics::Scalar>(self) -> T {
        T::of(self)
    }
}

#[test]
fn softmax_then_pick_matches_finite_difference() {
    let x = Tensor::vector(vec![0.2f32, -0.4, 0.9, 0.1]);
    let mut t = Tape::<f32>::new();
    let v = t.param(x.clone());
    let s = t.softmax(v, 0).unwrap();
    let pick = t.dot_const(s, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let g = t.backward(pick).unwrap().wrt(&t, v);
    let fd = finite_diff_grad(
        |p: &Tensor<f64>| {
            let m = p.data().iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = p.data().iter().map(|v| (v - m).exp()).sum();
            (p.data()[2] - m).exp() / z
        },
        &x.cast(),
        1e-3,
    );
    assert!(assert_grad_close(&g, &fd, 1e-4, 1e-5).passed);
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[5, 6]);
        let w = rand_tensor(&mut rng, &[6, 6]);
        let mut t = Tape::<f32>::new();
        let xv = t.param(x);
        let wv = t.param(w);
        let h = t.matmul(xv, wv).unwrap();
        let h = t.gelu(h);
        let s = t.softmax_rows(h).unwrap();
        let row = t.gather_rows(s, &[2]).unwrap();
        let row = t.reshape(row, [6]).unwrap();
        let l = t.cross_entropy(row, 4).unwrap();
        let g = t.backward(l).unwrap();
        (g.wrt(&t, xv), g.wrt(&t, wv))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1, b2);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        xs in proptest::collection::vec(-30.0f32..30.0, 1..12),
        c in -50.0f32..50.0,
    ) {
        let n = xs.len();
        let mut t = Tape::<f32>::inference();
        let x = t.constant(Tensor::vector(xs.clone()));
        let y = t.softmax(x, 0).unwrap();
        let s: f32 = t.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(t.value(y).data().iter().all(|&v| v >= 0.0));
        // shifting a whole-number amount keeps x - max exact
        let shifted: Vec<f32> = xs.iter().map(|v| v + c.round()).collect();
        let exact = xs.iter().zip(&shifted).all(|(a, b)| (b - c.round()) == *a);
        let x2 = t.constant(Tensor::vector(shifted));
        let y2 = t.softmax(x2, 0).unwrap();
        if exact {
            let m1 = xs.iter().cloned().fold(f32::MIN, f32::max);
            let m2 = m1 + c.round();
            let d1: Vec<f32> = xs.iter().map(|v| v - m1).collect();
            let d2: Vec<f32> = t.value(x2).data().iter().map(|v| v - m2).collect();
            if d1 == d2 {
                prop_assert_eq!(t.value(y).data(), t.value(y2).data());
            }
        }
        prop_assert_eq!(t.value(y2).len(), n);
    }
}
