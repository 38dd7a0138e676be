use lac_core::costmodel::*;
use lac_core::policy::{PolicyConfig, PolicyNet};
use lac_core::scenegen::{build_motion_input, estimate_flow, generate_episode, SceneConfig};
use lac_core::transformer::{ModelConfig, Transformer};
use proptest::prelude::*;

fn frame() -> lac_core::numerics::Tensor<f32> {
    generate_episode(&SceneConfig::default(), 4).unwrap().frames[5].to_tensor()
}

#[test]
fn instrumented_counts_match_closed_forms_for_every_ratio() {
    let model = Transformer::init(ModelConfig::default(), 3).unwrap();
    let policy = PolicyConfig::default();
    let table = flops_table(&model, &policy, &frame(), &policy.ratios).unwrap();
    for r in &table {
        assert_eq!(r.matmul_exact(), Some(true), "rho {}", r.rho);
        let err = r.relative_error.unwrap();
        assert!(err <= 0.05, "rho {} relative error {err}", r.rho);
    }
}

#[test]
fn identical_runs_count_identically() {
    let model = Transformer::init(ModelConfig::default(), 3).unwrap();
    let a = measure_backbone(&model, &frame(), 0.4).unwrap();
    let b = measure_backbone(&model, &frame(), 0.4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn policy_macs_match_conv_specs() {
    let cfg = PolicyConfig::default();
    let net = PolicyNet::init(cfg.clone(), (32, 32, 4), 1).unwrap();
    let ep = generate_episode(&SceneConfig::default(), 1).unwrap();
    let flow = estimate_flow(&ep.frames[0], &ep.frames[1], 4, 2).unwrap();
    let v = build_motion_input(&ep.frames[1], &flow, 2.0).unwrap();
    let expected: u64 = cfg.conv_specs(32, 32).iter().map(ConvSpec::macs).sum();
    assert_eq!(measure_policy_macs(&net, &v).unwrap(), expected);
}

#[test]
fn policy_cost_is_small_and_independent_of_backbone_size() {
    let policy = PolicyConfig::default();
    let small = ModelConfig::default();
    let big = ModelConfig { dim: 128, ffn: 512, layers: 4, ..ModelConfig::default() };
    let cs = policy_cost(&policy, small.height, small.width);
    assert_eq!(cs, policy_cost(&policy, big.height, big.width));
    let base = small.layers as u64 * flops_baseline(small.tokens(), small.dim, small.ffn);
    assert!((cs as f64) < 0.1 * base as f64, "{cs} vs {base}");
    let dims = CostDims::new(&small, &policy);
    for rho in [0.2, 0.4, 0.6, 0.8] {
        assert!(FlopsReport::analytic(dims, rho, cs).delta_total > 0, "rho {rho}");
    }
    assert_eq!(FlopsReport::analytic(dims, 0.0, cs).delta_total, -(cs as i64));
}

proptest! {
    #[test]
    fn lac_never_exceeds_baseline(n in 1usize..300, d in 1usize..128, m in 1usize..512, rho in 0.0f64..0.999) {
        let base = flops_baseline(n, d, m);
        let lac = flops_lac(n, rho, d, m);
        prop_assert!(lac <= base);
        prop_assert_eq!(lac == base, active_tokens(n, rho) == n);
        prop_assert!(flops_baseline(2 * n, d, m) > 2 * base);
    }

    #[test]
    fn delta_is_monotone_in_rho(n in 1usize..300, a in 0.0f64..0.999, b in 0.0f64..0.999) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let d = |r| flops_delta(2, flops_baseline(n, 64, 256), flops_lac(n, r, 64, 256), 1000);
        prop_assert!(d(lo) <= d(hi));
    }
}
