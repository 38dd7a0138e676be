//! Closed-form FLOP accounting for the backbone and policy, and its
//! validation against the instrumented counts recorded by the tape.
//!
//! Units: the backbone closed forms count each matrix-product
//! multiply-accumulate once (`4ND²` is exactly the MAC count of the four
//! projections). Policy conv costs are in FLOPs at two per
//! multiply-accumulate. Instrumented counts keep MACs and FLOPs apart so
//! both can be compared.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Bucket, FlopCounter, Tape, Tensor};
use crate::policy::{cached_count, rank_mask, PolicyConfig, PolicyNet};
use crate::scenegen::flow_cost;
use crate::transformer::{ModelConfig, Transformer};

/// One conv layer with stride 1 and output size `h_out×w_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvSpec {
    /// Same padding: the output matches the `h×w` input.
    pub fn same(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> Self {
        ConvSpec { c_in, c_out, k, h_out: h, w_out: w }
    }

    pub fn macs(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k * self.h_out * self.w_out) as u64
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }
}

/// `C_base = 4ND² + 2N²D + 2NDM` per layer.
pub fn flops_baseline(n: usize, d: usize, m: usize) -> u64 {
    let (n, d, m) = (n as u64, d as u64, m as u64);
    4 * n * d * d + 2 * n * n * d + 2 * n * d * m
}

/// `N_act = N − ⌊N·ρ⌋`.
pub fn active_tokens(n: usize, rho: f64) -> usize {
    n - cached_count(n, rho)
}

/// `C_lac = 4N_act·D² + 2N_act·N·D + 2N_act·D·M` per layer.
pub fn flops_lac(n: usize, rho: f64, d: usize, m: usize) -> u64 {
    flops_active(active_tokens(n, rho), n, d, m)
}

/// [`flops_lac`] for an explicit active-token count.
pub fn flops_active(n_act: usize, n: usize, d: usize, m: usize) -> u64 {
    let (na, n, d, m) = (n_act as u64, n as u64, d as u64, m as u64);
    4 * na * d * d + 2 * na * n * d + 2 * na * d * m
}

/// `Σ 2·C_out·C_in·k²·H'·W'` over the policy layers plus the flow estimator.
pub fn flops_policy(convs: &[ConvSpec], flow: u64) -> u64 {
    convs.iter().map(ConvSpec::flops).sum::<u64>() + flow
}

/// `ΔFLOPs_total = L·(C_base − C_lac) − C_policy`.
pub fn flops_delta(layers: usize, c_base: u64, c_lac: u64, c_policy: u64) -> i64 {
    layers as i64 * (c_base as i64 - c_lac as i64) - c_policy as i64
}

/// Dimensions entering the closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostDims {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub l: usize,
    pub h: usize,
    pub w: usize,
    pub c_cnn: usize,
}

impl CostDims {
    pub fn new(model: &ModelConfig, policy: &PolicyConfig) -> Self {
        CostDims {
            n: model.tokens(),
            d: model.dim,
            m: model.ffn,
            l: model.layers,
            h: model.height,
            w: model.width,
            c_cnn: policy.selector_channels,
        }
    }
}

/// `C_policy` for a policy configuration on an `h×w` input.
pub fn policy_cost(policy: &PolicyConfig, h: usize, w: usize) -> u64 {
    flops_policy(
        &policy.conv_specs(h, w),
        flow_cost(h, w, policy.flow_block, policy.flow_radius),
    )
}

/// Instrumented counts of one step, split the way the closed forms are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MeasuredCount {
    /// MACs of the visual-row projection, attention and FFN products.
    pub matmul_macs: u64,
    /// FLOPs of everything the visual rows cost inside the layers.
    pub layer_flops: u64,
    /// Norms, biases, rotary, softmax and residuals of the visual rows.
    pub overhead_flops: u64,
    pub readout_flops: u64,
    pub embed_flops: u64,
    pub head_flops: u64,
    pub policy_flops: u64,
    pub total_flops: u64,
}

/// Splits a trace's counter; a trace recorded without counting is a
/// contract error.
pub fn instrumented_count(counter: Option<&FlopCounter>) -> Result<MeasuredCount> {
    let c = counter.ok_or_else(|| Error::contract("FLOP counting was disabled for this trace"))?;
    let layer = [Bucket::Projection, Bucket::Attention, Bucket::Ffn, Bucket::LayerOverhead];
    Ok(MeasuredCount {
        matmul_macs: [Bucket::Projection, Bucket::Attention, Bucket::Ffn]
            .iter()
            .map(|&b| c.get(b).macs)
            .sum(),
        layer_flops: layer.iter().map(|&b| c.get(b).flops()).sum(),
        overhead_flops: c.get(Bucket::LayerOverhead).flops(),
        readout_flops: c.get(Bucket::Readout).flops(),
        embed_flops: c.get(Bucket::Embed).flops(),
        head_flops: c.get(Bucket::Head).flops(),
        policy_flops: c.get(Bucket::Policy).flops() + c.get(Bucket::Flow).flops(),
        total_flops: c.total_flops(),
    })
}

/// Counts a step that reuses `⌊N·ρ⌋` rows (the lowest token indices) of a
/// cache seeded by a full forward on the same frame.
pub fn measure_backbone(model: &Transformer, frame: &Tensor<f32>, rho: f64) -> Result<MeasuredCount> {
    let n = model.config().tokens();
    let prev = model.full_forward(frame, None, 0)?;
    let mask = rank_mask(&vec![0.0f32; n], cached_count(n, rho))?;
    let out = model.step(frame, Some(&mask.hard), Some(&prev.cache), 1, true)?;
    instrumented_count(out.flops.as_ref())
}

/// MACs executed by both policy networks on a `5×H×W` input.
pub fn measure_policy_macs(policy: &PolicyNet, input: &Tensor<f32>) -> Result<u64> {
    let mut tape = Tape::inference().with_counting();
    let p = policy.bind(&mut tape, &[]);
    let v = tape.constant(input.clone());
    policy.selector_forward(&mut tape, &p, v)?;
    policy.predictor_forward(&mut tape, &p, v)?;
    Ok(tape.flops()?.get(Bucket::Policy).macs)
}

/// One CSV row per `(config, ρ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub rho: f64,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub l: usize,
    pub h: usize,
    pub w: usize,
    pub c_cnn: usize,
    pub n_act: usize,
    pub c_base: u64,
    pub c_lac: u64,
    pub c_policy: u64,
    pub delta_layer: i64,
    pub delta_total: i64,
    /// Visual-row layer FLOPs over all layers, compared with `2·L·C_lac`.
    pub measured: Option<u64>,
    pub measured_matmul_macs: Option<u64>,
    pub measured_overhead: Option<u64>,
    pub measured_readout: Option<u64>,
    pub measured_embed_head: Option<u64>,
    /// `|measured − 2·L·C_lac| / (2·L·C_lac)`.
    pub relative_error: Option<f64>,
}

impl FlopsReport {
    pub fn analytic(dims: CostDims, rho: f64, c_policy: u64) -> Self {
        let c_base = flops_baseline(dims.n, dims.d, dims.m);
        let c_lac = flops_lac(dims.n, rho, dims.d, dims.m);
        FlopsReport {
            rho,
            n: dims.n,
            d: dims.d,
            m: dims.m,
            l: dims.l,
            h: dims.h,
            w: dims.w,
            c_cnn: dims.c_cnn,
            n_act: active_tokens(dims.n, rho),
            c_base,
            c_lac,
            c_policy,
            delta_layer: c_base as i64 - c_lac as i64,
            delta_total: flops_delta(dims.l, c_base, c_lac, c_policy),
            measured: None,
            measured_matmul_macs: None,
            measured_overhead: None,
            measured_readout: None,
            measured_embed_head: None,
            relative_error: None,
        }
    }

    pub fn with_measurement(mut self, m: &MeasuredCount) -> Self {
        let expected = (2 * self.l as u64 * self.c_lac) as f64;
        self.measured = Some(m.layer_flops);
        self.measured_matmul_macs = Some(m.matmul_macs);
        self.measured_overhead = Some(m.overhead_flops);
        self.measured_readout = Some(m.readout_flops);
        self.measured_embed_head = Some(m.embed_flops + m.head_flops);
        self.relative_error = Some((m.layer_flops as f64 - expected).abs() / expected);
        self
    }

    /// Whether the instrumented matmul MACs equal `L·C_lac` exactly.
    pub fn matmul_exact(&self) -> Option<bool> {
        self.measured_matmul_macs.map(|m| m == self.l as u64 * self.c_lac)
    }
}

/// Analytic and instrumented reports for every ratio.
pub fn flops_table(model: &Transformer, policy: &PolicyConfig, frame: &Tensor<f32>, ratios: &[f64]) -> Result<Vec<FlopsReport>> {
    let cfg = model.config();
    let dims = CostDims::new(cfg, policy);
    let c_policy = policy_cost(policy, cfg.height, cfg.width);
    ratios
        .iter()
        .map(|&rho| Ok(FlopsReport::analytic(dims, rho, c_policy).with_measurement(&measure_backbone(model, frame, rho)?)))
        .collect()
}
